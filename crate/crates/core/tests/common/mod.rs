#![allow(dead_code)]

use flowsac_core::nn::{Layer, MlpParams};
use flowsac_core::{Matrix, Vector};

/// Flat parameter vector in layer order, weights (row-major) before biases.
pub fn flatten(p: &MlpParams) -> Vec<f64> {
    let mut out = Vec::new();
    for l in p.layers() {
        out.extend_from_slice(l.weight().as_slice());
        out.extend_from_slice(l.bias().as_slice());
    }
    out
}

pub fn unflatten(like: &MlpParams, flat: &[f64]) -> MlpParams {
    let mut at = 0;
    let mut layers = Vec::new();
    for l in like.layers() {
        let (r, c) = (l.weight().rows(), l.weight().cols());
        let w = Matrix::new(r, c, flat[at..at + r * c].to_vec()).unwrap();
        at += r * c;
        let b = Vector::new(flat[at..at + r].to_vec()).unwrap();
        at += r;
        layers.push(Layer::new(w, b).unwrap());
    }
    MlpParams::new(layers, like.activation()).unwrap()
}

pub fn with_offset(p: &MlpParams, index: usize, h: f64) -> MlpParams {
    let mut flat = flatten(p);
    flat[index] += h;
    unflatten(p, &flat)
}

/// Central difference of `f` with respect to parameter `index`.
pub fn central_difference(p: &MlpParams, index: usize, h: f64, f: impl Fn(&MlpParams) -> f64) -> f64 {
    (f(&with_offset(p, index, h)) - f(&with_offset(p, index, -h))) / (2.0 * h)
}

/// `|a − b| ≤ tol · max(1, |b|)`.
pub fn close_scaled(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

pub fn v(values: &[f64]) -> Vector {
    Vector::new(values.to_vec()).unwrap()
}
