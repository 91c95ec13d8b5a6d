//! WebAssembly bindings for the static page in `www/`.
//!
//! The bindings are thin wrappers over [`ops`], which native tests exercise
//! directly.

use wasm_bindgen::prelude::*;

use flowprompt::diffusion::NoiseSchedule;
use flowprompt::flow::FlowParams;

pub mod ops;

fn js(e: flowprompt::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// A synthetic clip of one moving shape.
#[wasm_bindgen]
pub struct Scene {
    inner: ops::Scene,
}

#[wasm_bindgen]
impl Scene {
    #[wasm_bindgen(constructor)]
    pub fn new(shape: &str, color: &str, vx: f64, vy: f64, textured: bool, seed: u64) -> Result<Scene, JsError> {
        ops::Scene::new(shape, color, vx, vy, textured, seed)
            .map(|inner| Scene { inner })
            .map_err(js)
    }

    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        ops::SIZE
    }

    #[wasm_bindgen(getter, js_name = nFrames)]
    pub fn n_frames(&self) -> usize {
        self.inner.clip.n_frames()
    }

    #[wasm_bindgen(getter)]
    pub fn caption(&self) -> String {
        self.inner.caption.clone()
    }

    /// RGBA bytes for `ImageData`.
    #[wasm_bindgen(js_name = frameRgba)]
    pub fn frame_rgba(&self, i: usize) -> Result<Vec<u8>, JsError> {
        self.inner.frame_rgba(i).map_err(js)
    }

    /// Horn-Schunck flow from frame `i` to `i + 1`.
    pub fn flow(&self, i: usize, smoothness: f64, iterations: usize) -> Result<Flow, JsError> {
        let params = FlowParams {
            smoothness_weight: smoothness,
            n_iterations: iterations,
            ..FlowParams::default()
        };
        self.inner.flow(i, &params).map(|r| Flow { inner: r }).map_err(js)
    }

    /// Frame `i` after forward noising to step `t`.
    #[wasm_bindgen(js_name = noisedRgba)]
    pub fn noised_rgba(&self, i: usize, t: usize, schedule: &Schedule, seed: u64) -> Result<Vec<u8>, JsError> {
        ops::noised_frame(&self.inner, i, t, &schedule.inner, seed).map_err(js)
    }
}

#[wasm_bindgen]
pub struct Flow {
    inner: ops::FlowReport,
}

#[wasm_bindgen]
impl Flow {
    #[wasm_bindgen(getter, js_name = estimateRgba)]
    pub fn estimate_rgba(&self) -> Vec<u8> {
        self.inner.estimate_rgba.clone()
    }

    #[wasm_bindgen(getter, js_name = truthRgba)]
    pub fn truth_rgba(&self) -> Vec<u8> {
        self.inner.truth_rgba.clone()
    }

    #[wasm_bindgen(getter, js_name = endpointError)]
    pub fn endpoint_error(&self) -> f64 {
        self.inner.endpoint_error
    }

    #[wasm_bindgen(getter)]
    pub fn tv(&self) -> f64 {
        self.inner.tv
    }

    #[wasm_bindgen(getter, js_name = meanU)]
    pub fn mean_u(&self) -> f64 {
        self.inner.mean_flow.0
    }

    #[wasm_bindgen(getter, js_name = meanV)]
    pub fn mean_v(&self) -> f64 {
        self.inner.mean_flow.1
    }
}

/// Linear beta noise schedule.
#[wasm_bindgen]
pub struct Schedule {
    inner: NoiseSchedule,
}

#[wasm_bindgen]
impl Schedule {
    #[wasm_bindgen(constructor)]
    pub fn new(t_train: usize, beta_lo: f64, beta_hi: f64) -> Result<Schedule, JsError> {
        ops::schedule(t_train, beta_lo, beta_hi)
            .map(|inner| Schedule { inner })
            .map_err(js)
    }

    #[wasm_bindgen(getter, js_name = tTrain)]
    pub fn t_train(&self) -> usize {
        self.inner.t_train()
    }

    #[wasm_bindgen(js_name = alphabarCurve)]
    pub fn alphabar_curve(&self, n_points: usize) -> Vec<f64> {
        ops::alphabar_curve(&self.inner, n_points)
    }
}
