#![allow(dead_code)]

use jgrsc::gmm_prior::{GmmComponent, GmmModel, TrainingMeta};
use jgrsc::Image;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_image(w: usize, h: usize, seed: u64) -> Image {
    let mut r = rng(seed);
    Image::from_fn(w, h, |_, _| r.gen_range(0.0..255.0))
}

/// Smooth-ish test picture: gradients plus a disc, integer valued.
pub fn synthetic_scene(w: usize, h: usize) -> Image {
    Image::from_fn(w, h, |r, c| {
        let (y, x) = (r as f64, c as f64);
        let disc = if (y - h as f64 / 2.0).hypot(x - w as f64 / 3.0) < w as f64 / 5.0 { 80.0 } else { 0.0 };
        (40.0 + 0.8 * x + 0.4 * y + disc + 20.0 * (x / 5.0).sin()).round().clamp(0.0, 255.0)
    })
}

/// Random symmetric positive-definite matrix with eigenvalues in
/// `[lo, hi]`.
pub fn random_spd(n: usize, lo: f64, hi: f64, r: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| r.gen_range(-1.0..1.0));
    let q = a.qr().q();
    let d = DVector::from_fn(n, |_, _| r.gen_range(lo..hi));
    &q * DMatrix::from_diagonal(&d) * q.transpose()
}

/// Two-component model on `p x p` patches: one flat, one busy.
pub fn toy_model(p: usize, group_size: usize) -> GmmModel {
    let n = p * p;
    let mut r = rng(99);
    let comps = vec![
        GmmComponent::from_covariance(0.6, &random_spd(n, 1.0, 20.0, &mut r)).unwrap(),
        GmmComponent::from_covariance(0.4, &random_spd(n, 50.0, 900.0, &mut r)).unwrap(),
    ];
    GmmModel::new(comps, p, group_size, TrainingMeta::default()).unwrap()
}

pub fn write_pgm(img: &Image, path: &std::path::Path) {
    jgrsc::pgm::save_pgm(img, path).unwrap();
}
