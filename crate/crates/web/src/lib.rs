//! WebAssembly bindings for the defense playground.
//!
//! [`Demo`] is a thin JS-facing shell over [`Playground`]; images cross the
//! boundary as row-major `Float64Array`s of `size * size` pixels in `[0, 1]`.

mod playground;

pub use playground::{AttackTrace, DefenseView, ImageFit, Playground, Retrieval};

use tensor_defense::decomp::Method;
use wasm_bindgen::prelude::*;

fn js(e: tensor_defense::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn method(name: &str) -> Result<Method, JsError> {
    name.parse().map_err(js)
}

#[wasm_bindgen]
pub struct Demo {
    inner: Playground,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, depth: usize, pairs: usize) -> Result<Demo, JsError> {
        Ok(Demo { inner: Playground::new(seed.into(), depth, pairs).map_err(js)? })
    }

    pub fn len(&self) -> usize {
        self.inner.len()
    }

    #[wasm_bindgen(js_name = isEmpty)]
    pub fn is_empty(&self) -> bool {
        self.inner.is_empty()
    }

    #[wasm_bindgen(js_name = imageSize)]
    pub fn image_size(&self) -> usize {
        self.inner.image_size()
    }

    pub fn epsilon(&self) -> f64 {
        self.inner.epsilon()
    }

    pub fn caption(&self, index: usize) -> Result<String, JsError> {
        let tokens = self.inner.caption(index).map_err(js)?;
        Ok(tokens.iter().map(|t| format!("w{t}")).collect::<Vec<_>>().join(" "))
    }

    #[wasm_bindgen(js_name = cleanImage)]
    pub fn clean_image(&self, index: usize) -> Result<Vec<f64>, JsError> {
        Ok(self.inner.clean_image(index).map_err(js)?.data().to_vec())
    }

    /// Rank slider: the blended low-rank stack.
    #[wasm_bindgen(js_name = imageFit)]
    pub fn image_fit(&self, method_name: &str, rank: usize, alpha: f64) -> Result<FitView, JsError> {
        let fit = self.inner.image_fit(method(method_name)?, rank, alpha).map_err(js)?;
        Ok(FitView { fit })
    }

    #[wasm_bindgen(js_name = attackTrace)]
    pub fn attack_trace(&self, index: usize, steps: usize) -> Result<TraceView, JsError> {
        Ok(TraceView { trace: self.inner.attack_trace(index, steps).map_err(js)? })
    }

    /// Mean similarity and recall@1 as
    /// `[clean, attacked, defended clean, defended attacked]` pairs.
    #[wasm_bindgen(js_name = defenseView)]
    pub fn defense_view(&self, method_name: &str, rank: usize, alpha: f64) -> Result<Vec<f64>, JsError> {
        let v = self.inner.defense_view(method(method_name)?, rank, alpha).map_err(js)?;
        Ok([v.clean, v.attacked, v.defended_clean, v.defended_attacked]
            .iter()
            .flat_map(|r| [r.mean_sim, r.recall_at_1])
            .collect())
    }
}

#[wasm_bindgen]
pub struct FitView {
    fit: ImageFit,
}

#[wasm_bindgen]
impl FitView {
    /// Image `index` of the blended stack.
    pub fn image(&self, index: usize) -> Result<Vec<f64>, JsError> {
        Ok(self.fit.blended.slice0(index).map_err(js)?.into_data())
    }

    #[wasm_bindgen(getter, js_name = relativeError)]
    pub fn relative_error(&self) -> f64 {
        self.fit.relative_error
    }

    #[wasm_bindgen(getter)]
    pub fn ranks(&self) -> Vec<u32> {
        self.fit.ranks.iter().map(|&r| r as u32).collect()
    }
}

#[wasm_bindgen]
pub struct TraceView {
    trace: AttackTrace,
}

#[wasm_bindgen]
impl TraceView {
    #[wasm_bindgen(getter)]
    pub fn adversarial(&self) -> Vec<f64> {
        self.trace.adversarial.data().to_vec()
    }

    #[wasm_bindgen(getter)]
    pub fn magnified(&self) -> Vec<f64> {
        self.trace.magnified.data().to_vec()
    }

    #[wasm_bindgen(getter)]
    pub fn similarity(&self) -> Vec<f64> {
        self.trace.similarity.clone()
    }
}
