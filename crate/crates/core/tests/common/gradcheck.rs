//! Analytic gradients against central finite differences on toy models.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use drivecluster::frame_codec::{triplet_loss_and_grad, FrameCodec, FrameCodecConfig};
use drivecluster::nn::Parameterized;
use drivecluster::sequence_codec::{la_loss_and_grad, normalize, pair_indices, LaBatch, PairMode, SeqCodec, SeqFlags, SeqItem};

pub const TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-6;

/// Largest relative error; entries whose magnitude is below `1e-5` are
/// compared on that scale instead.
fn worst(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-5))
        .fold(0.0, f64::max)
}

fn central(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + STEP;
            let up = f(&x);
            x[i] = orig - STEP;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

fn flat_params<M: Parameterized<f64>>(m: &M) -> Vec<f64> {
    m.named_params().iter().flat_map(|(_, p)| p.value.clone()).collect()
}

fn flat_grads<M: Parameterized<f64>>(m: &M) -> Vec<f64> {
    m.named_params().iter().flat_map(|(_, p)| p.grad.clone()).collect()
}

fn load_params<M: Parameterized<f64>>(m: &mut M, x: &[f64]) {
    let mut off = 0;
    for p in m.params_mut() {
        let n = p.len();
        p.value.copy_from_slice(&x[off..off + n]);
        off += n;
    }
}

fn verdict(name: &str, err: f64) -> Result<f64, String> {
    if err < TOLERANCE {
        Ok(err)
    } else {
        Err(format!("{name}: relative error {err:.2e}"))
    }
}

/// Reconstruction loss of a small convolutional codec, w.r.t. every weight.
pub fn recon(seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = FrameCodecConfig {
        omega: 0.0,
        kl_weight: 0.0,
        ..FrameCodecConfig::default()
    };
    let mut model: FrameCodec<f64> = FrameCodec::new(9, 3, &[2, 2], seed).map_err(|e| e.to_string())?;
    let images: Vec<f64> = (0..2 * 4 * 81).map(|_| rng.gen_range(0.0..1.0)).collect();
    let noise = vec![0.0; 2 * 3];
    model.zero_grad();
    model.loss_and_backward(&images, &noise, &[], &cfg).map_err(|e| e.to_string())?;
    let analytic = flat_grads(&model);
    let numeric = central(&flat_params(&model), |x| {
        let mut m = model.clone();
        load_params(&mut m, x);
        m.loss_and_backward(&images, &noise, &[], &cfg).unwrap().recon
    });
    verdict("L_recon", worst(&analytic, &numeric))
}

/// Triplet loss w.r.t. the feature rows, and through the encoder.
pub fn triplet(seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = 3;
    let groups = [[0, 1, 2, 6], [3, 4, 5, 0], [6, 7, 5, 2]];
    let feats: Vec<f64> = (0..8 * dim).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let (_, analytic) = triplet_loss_and_grad(&feats, dim, &groups, 1.0);
    let numeric = central(&feats, |x| triplet_loss_and_grad(x, dim, &groups, 1.0).0);
    let direct = verdict("L^t (features)", worst(&analytic, &numeric))?;

    let cfg = FrameCodecConfig {
        omega: 1.0,
        alpha: 5.0,
        kl_weight: 0.0,
        ..FrameCodecConfig::default()
    };
    let mut model: FrameCodec<f64> = FrameCodec::new(9, 3, &[2, 2], seed + 1).map_err(|e| e.to_string())?;
    let images: Vec<f64> = (0..4 * 4 * 81).map(|_| rng.gen_range(0.0..1.0)).collect();
    let noise = vec![0.0; 4 * 3];
    let groups = [[0, 1, 2, 3]];
    let triplet_only = |m: &mut FrameCodec<f64>| {
        let with = m.loss_and_backward(&images, &noise, &groups, &cfg).unwrap();
        with.triplet
    };
    // Gradient of the triplet term alone: full minus reconstruction-only.
    model.zero_grad();
    model.loss_and_backward(&images, &noise, &groups, &cfg).map_err(|e| e.to_string())?;
    let full = flat_grads(&model);
    model.zero_grad();
    let recon_cfg = FrameCodecConfig { omega: 0.0, ..cfg.clone() };
    model.loss_and_backward(&images, &noise, &groups, &recon_cfg).map_err(|e| e.to_string())?;
    let analytic: Vec<f64> = full.iter().zip(flat_grads(&model)).map(|(a, b)| a - b).collect();
    let numeric = central(&flat_params(&model), |x| {
        let mut m = model.clone();
        load_params(&mut m, x);
        triplet_only(&mut m)
    });
    let through = verdict("L^t (encoder)", worst(&analytic, &numeric))?;
    Ok(direct.max(through))
}

fn items(rng: &mut ChaCha8Rng, d: usize) -> Vec<SeqItem<f64>> {
    [5usize, 3, 4]
        .iter()
        .map(|&n| {
            let steps: Vec<Vec<f64>> = (0..2 * n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let p = pair_indices(steps.len(), PairMode::Interleaved, 1, true).unwrap();
            let g = |idx: &[usize]| idx.iter().map(|&i| steps[i].clone()).collect();
            SeqItem {
                input: g(&p.input),
                recon_target: g(&p.recon),
                pred_target: g(&p.pred),
            }
        })
        .collect()
}

fn seq_model(rng: &mut ChaCha8Rng, d: usize, ds: usize, seed: u64) -> Result<SeqCodec<f64>, String> {
    let mut model: SeqCodec<f64> = SeqCodec::new(d, ds, 2, SeqFlags::default(), seed).map_err(|e| e.to_string())?;
    for p in model.params_mut() {
        for v in p.value.iter_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    Ok(model)
}

/// Reconstruction-plus-prediction loss of a two-layer recurrent codec.
pub fn rp(seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, ds) = (3, 4);
    let mut model = seq_model(&mut rng, d, ds, seed)?;
    let batch = items(&mut rng, d);
    model.zero_grad();
    model.loss_and_backward(&batch, None, false).map_err(|e| e.to_string())?;
    let analytic = flat_grads(&model);
    let numeric = central(&flat_params(&model), |x| {
        let mut m = model.clone();
        load_params(&mut m, x);
        m.loss_and_backward(&batch, None, false).unwrap().total
    });
    verdict("L^rp", worst(&analytic, &numeric))
}

/// Local-aggregation loss w.r.t. the query, and through the codec.
pub fn la(seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ds = 4;
    let bank: Vec<Vec<f64>> = (0..6).map(|_| normalize(&(0..ds).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>())).collect();
    let q: Vec<f64> = (0..ds).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (members, background) = (vec![0, 1, 3, 5], vec![1, 5]);
    let (_, analytic) = la_loss_and_grad(&q, &bank, &members, &background, 0.3);
    let numeric = central(&q, |x| la_loss_and_grad(x, &bank, &members, &background, 0.3).0);
    let direct = verdict("L^la (query)", worst(&analytic, &numeric))?;

    let d = 3;
    let mut model = seq_model(&mut rng, d, ds, seed + 1)?;
    let batch = items(&mut rng, d);
    let sets = vec![(vec![0, 1, 4], vec![1, 4]), (vec![2, 3, 5], vec![3]), (vec![0, 1, 2, 3], vec![0, 2])];
    let la_batch = |ratio: f64| LaBatch {
        bank: &bank,
        sets: sets.clone(),
        ratio,
        tau: 0.5,
    };
    model.zero_grad();
    model.loss_and_backward(&batch, Some(&la_batch(1.0)), false).map_err(|e| e.to_string())?;
    let with = flat_grads(&model);
    model.zero_grad();
    model.loss_and_backward(&batch, None, false).map_err(|e| e.to_string())?;
    let analytic: Vec<f64> = with.iter().zip(flat_grads(&model)).map(|(a, b)| a - b).collect();
    let numeric = central(&flat_params(&model), |x| {
        let mut m = model.clone();
        load_params(&mut m, x);
        m.loss_and_backward(&batch, Some(&la_batch(1.0)), false).unwrap().la
    });
    let through = verdict("L^la (codec)", worst(&analytic, &numeric))?;
    Ok(direct.max(through))
}

/// Worst relative error of each check.
pub fn all(seed: u64) -> Result<Vec<(&'static str, f64)>, String> {
    Ok(vec![
        ("L_recon", recon(seed)?),
        ("L^t", triplet(seed + 1)?),
        ("L^rp", rp(seed + 2)?),
        ("L^la", la(seed + 3)?),
    ])
}
