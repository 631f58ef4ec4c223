//! Compares the network and metrics against frozen float64 outputs of an
//! independent PyTorch / scikit-image implementation.
//! Regenerate with `python3 make_reference_data.py` inside `tests/data`.

use std::path::PathBuf;

use rainsep_core::metrics::{psnr, ssim};
use rainsep_core::network::checkpoint::load_model;
use rainsep_core::ImageTensor;
use serde::Deserialize;

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

#[derive(Deserialize)]
struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Deserialize)]
struct NetworkReference {
    derain_odd: Tensor,
    background: Tensor,
    rain: Tensor,
    recomposed: Tensor,
    discriminator: Tensor,
}

fn assert_close(label: &str, got: impl Iterator<Item = f32>, want: &Tensor, shape: &[usize], tol: f64) {
    assert_eq!(shape, want.shape.as_slice(), "{label}: shape");
    let got: Vec<f32> = got.collect();
    assert_eq!(got.len(), want.values.len(), "{label}: length");
    let worst = got.iter().zip(&want.values).map(|(&g, &w)| (g as f64 - w).abs()).fold(0.0, f64::max);
    assert!(worst < tol, "{label}: max abs error {worst:e}");
}

fn image_check(label: &str, got: &ImageTensor, want: &Tensor) {
    let (h, w, c) = got.dim();
    assert_close(label, got.data().iter().copied(), want, &[h, w, c], 1e-4);
}

#[test]
fn network_matches_pytorch_reference() {
    let reference: NetworkReference =
        serde_json::from_slice(&std::fs::read(data("network_reference.json")).unwrap()).unwrap();
    let model = load_model(&data("network_reference.ckpt"), None).unwrap();

    let odd = ImageTensor::load_png(&data("network_input_odd.png")).unwrap();
    image_check("derain (reflect padded)", &model.derain(&odd).unwrap(), &reference.derain_odd);

    let square = ImageTensor::load_png(&data("network_input_square.png")).unwrap();
    let (b, r, o) = model.forward_full(&square).unwrap();
    image_check("background", &b, &reference.background);
    image_check("rain", &r, &reference.rain);
    image_check("recomposed", &o, &reference.recomposed);

    let d = model.discriminate(&square).unwrap();
    let (h, w) = d.dim();
    assert_close("discriminator", d.iter().copied(), &reference.discriminator, &[h, w], 1e-4);
}

#[derive(Deserialize)]
struct SsimCase {
    x: String,
    y: String,
    ssim: f64,
    psnr: f64,
}

#[derive(Deserialize)]
struct SsimReference {
    cases: Vec<SsimCase>,
    constant_zero_vs_one: f64,
}

#[test]
fn metrics_match_scikit_image() {
    let reference: SsimReference =
        serde_json::from_slice(&std::fs::read(data("ssim_reference.json")).unwrap()).unwrap();
    for case in &reference.cases {
        let x = ImageTensor::load_png(&data(&case.x)).unwrap();
        let y = ImageTensor::load_png(&data(&case.y)).unwrap();
        let s = ssim(&x, &y).unwrap();
        let p = psnr(&x, &y).unwrap();
        assert!((s - case.ssim).abs() < 1e-5, "{}: ssim {s} vs {}", case.x, case.ssim);
        assert!((p - case.psnr).abs() < 1e-4, "{}: psnr {p} vs {}", case.x, case.psnr);
    }
    let zeros = ImageTensor::filled(16, 16, 1, 0.0).unwrap();
    let ones = ImageTensor::filled(16, 16, 1, 1.0).unwrap();
    let s = ssim(&zeros, &ones).unwrap();
    assert!((s - reference.constant_zero_vs_one).abs() < 1e-6, "constant ssim {s}");
}
