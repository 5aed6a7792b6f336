//! WebAssembly bindings for the static demo page in `www/`: token heatmaps,
//! a blending mask under a threshold slider, and 2-D inversion paths.

pub mod demo;

use wasm_bindgen::prelude::*;

use demo::Session;

fn js(e: mmdit_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo {
    inner: Session,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<Demo, JsError> {
        Ok(Demo {
            inner: Session::new(seed as u64).map_err(js)?,
        })
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.inner.grid().0
    }

    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.inner.grid().1
    }

    #[wasm_bindgen(getter)]
    pub fn depth(&self) -> usize {
        self.inner.depth()
    }

    pub fn words(&self, prompt: &str) -> Vec<String> {
        self.inner.words(prompt)
    }

    /// Row-major heatmap values in `[0, 1]`.
    pub fn token_heatmap(&self, prompt: &str, word: &str, block: usize, t: f64) -> Result<Vec<f64>, JsError> {
        let m = self.inner.token_heatmap(prompt, word, block, t).map_err(js)?;
        Ok(m.values().to_vec())
    }

    pub fn prepare_mask(&mut self, source: &str, target: &str) -> Result<usize, JsError> {
        self.inner.prepare_mask(source, target).map_err(js)
    }

    /// Row-major binary mask.
    pub fn blend_mask(&self, theta: f64, sigma: f64, source_only: bool) -> Result<Vec<f64>, JsError> {
        let m = self.inner.blend_mask(theta, sigma, source_only).map_err(js)?;
        Ok(m.values().to_vec())
    }
}

/// States of a controlled inversion of a ring of points, flattened as
/// `[step][point][x, y]`.
#[wasm_bindgen]
pub fn inversion_paths(points: usize, gamma: f64, steps: usize, seed: u32) -> Result<Vec<f64>, JsError> {
    demo::inversion_paths(points, gamma, steps, seed as u64).map_err(js)
}
