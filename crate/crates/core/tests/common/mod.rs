#![allow(dead_code)]

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use semanticfl::experiments::ExperimentConfig;
use semanticfl::fl::ClientUpdate;
use semanticfl::losses::{total_loss, total_loss_grad, Anchors, LossWeights};
use semanticfl::nn::{BlockKind, ClientModel, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let mut v = gaussian(rng, rows * cols);
    for r in v.chunks_mut(cols) {
        let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        r.iter_mut().for_each(|x| *x /= n);
    }
    Tensor::matrix(rows, cols, v).unwrap()
}

/// Relative error of the analytic gradient of `total_loss` against central
/// differences, per trainable block. Blocks larger than `max_coords` are
/// checked on a seeded random subset of coordinates.
pub fn gradient_errors(
    model: &ClientModel,
    x: &Tensor,
    labels: &[usize],
    visual: &Tensor,
    text: &Tensor,
    weights: &LossWeights,
    max_coords: usize,
) -> Vec<(String, f64)> {
    let anchors = Anchors {
        visual: Some(visual),
        text: Some(text),
    };
    let (out, cache) = model.forward_train(x).unwrap();
    let (_, g) = total_loss_grad(&out, anchors, labels, weights).unwrap();
    let analytic = model.backward(&cache, &g.logits, &g.features);
    let loss = |p: &[f64]| {
        let o = model.forward_with(p, x, true).unwrap();
        total_loss(&o, anchors, labels, weights).unwrap().total
    };
    let mut params = model.params().to_vec();
    let mut pick = rng(99);
    let mut offset = 0;
    let mut errors = Vec::new();
    for block in model.blocks() {
        let len: usize = block.shape.iter().product();
        let range = offset..offset + len;
        offset += len;
        if block.kind == BlockKind::Buffer {
            continue;
        }
        let coords: Vec<usize> = if len <= max_coords {
            range.collect()
        } else {
            (0..max_coords).map(|_| pick.gen_range(range.clone())).collect()
        };
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for i in coords {
            let h = 1e-5 * params[i].abs().max(1.0);
            let orig = params[i];
            params[i] = orig + h;
            let up = loss(&params);
            params[i] = orig - h;
            let down = loss(&params);
            params[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            diff += (analytic[i] - numeric).powi(2);
            na += analytic[i].powi(2);
            nn += numeric.powi(2);
        }
        let scale = na.sqrt().max(nn.sqrt());
        let rel = if scale < 1e-10 { 0.0 } else { diff.sqrt() / scale };
        errors.push((block.name.clone(), rel));
    }
    assert_eq!(offset, model.param_len(), "blocks must tile the parameter vector");
    errors
}

pub fn random_updates(rng: &mut ChaCha8Rng, clients: usize, len: usize) -> Vec<ClientUpdate> {
    (0..clients)
        .map(|k| ClientUpdate {
            client_id: k,
            params: (0..len).map(|_| rng.gen_range(-5.0..5.0)).collect(),
            num_samples: rng.gen_range(1..1000),
            loss_trace: Vec::new(),
        })
        .collect()
}

/// Smoke preset writing into `dir`.
pub fn smoke(dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::preset("smoke").unwrap();
    cfg.output_dir = dir.to_path_buf();
    cfg
}
