//! JSON bodies of the teacher service.
//!
//! `POST /predict` takes `{ "shape": [n, h, w, c], "images": [...] }` with the
//! `n*h*w*c` pixels flattened row-major, and answers `{ "probs": [[...], ...] }`.
//! `GET /info` answers `{ "num_classes", "input_shape", "batch_limit" }`.
//! Floats travel as 32-bit values printed in shortest round-trip form.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictRequest {
    pub shape: Vec<usize>,
    pub images: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub probs: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InfoResponse {
    pub num_classes: usize,
    pub input_shape: [usize; 3],
    pub batch_limit: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorResponse {
    pub error: String,
}
