//! Built-in verification runs used by the `gradcheck` and `selftest`
//! subcommands and by the acceptance tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{grad_check, Graph};
use crate::encoders::FrozenTextHead;
use crate::error::Result;
use crate::federation::{batch_loss, ClassInput};
use crate::params::ParameterSet;
use crate::report::{compare_to_reference, fmt2, fmt2_signed, summarize, ReferenceFixture};
use crate::tensor::Tensor;
use crate::translator::{gaussian_vec, init_params, BoundTranslator, TranslatorConfig};

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-6;
/// Seed and temperature of the pinned gradient check.
pub const GRADCHECK_SEED: u64 = 0;
pub const GRADCHECK_TEMPERATURE: f64 = 0.01;

/// Inputs of the end-to-end gradient check: translator, frozen text
/// head, cosine/τ logits and cross-entropy on a small seeded instance.
pub struct GradcheckCase {
    pub translator: TranslatorConfig,
    pub params: ParameterSet,
    pub head: FrozenTextHead,
    pub classes: Vec<ClassInput>,
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub temperature: f64,
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

impl GradcheckCase {
    /// d=16, m=4, 4 heads, batch of 2 images, L=1, 3 classes.
    pub fn standard(seed: u64, temperature: f64) -> Result<Self> {
        let translator = TranslatorConfig {
            d_model: 16,
            n_ctx: 4,
            n_heads: 4,
            ffn_mult: 2,
            kv_len: 1,
        };
        let d = translator.d_model;
        let mut params = init_params(&translator, seed)?;
        // Perturb the layer-norm affine terms and fill the zero-initialized
        // output projections so every gradient is generic.
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9a);
        for name in ["ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias"] {
            let p = params.get_mut(name)?;
            for (v, n) in p.value.data_mut().iter_mut().zip(gaussian_vec(&mut rng, d, 0.1)) {
                *v += n;
            }
        }
        for name in ["w_o", "ffn_out"] {
            let p = params.get_mut(name)?;
            let n = p.value.len();
            let fresh = gaussian_vec(&mut rng, n, 1.0 / (d as f64).sqrt());
            p.value.data_mut().copy_from_slice(&fresh);
        }
        let head = FrozenTextHead::new(d, seed.wrapping_add(1))?;
        let classes = (0..3)
            .map(|_| ClassInput::pooled(&unit(gaussian_vec(&mut rng, d, 1.0))))
            .collect();
        let mut images = Vec::new();
        for _ in 0..2 {
            images.extend(unit(gaussian_vec(&mut rng, d, 1.0)));
        }
        Ok(GradcheckCase {
            translator,
            params,
            head,
            classes,
            images: Tensor::new(vec![2, d], images)?,
            labels: vec![0, 2],
            temperature,
        })
    }

    /// Loss at `params`; writes analytic gradients when `with_grads`.
    pub fn loss(&self, params: &mut ParameterSet, with_grads: bool) -> Result<f64> {
        let mut g = Graph::new();
        let bound = BoundTranslator::bind(&mut g, &self.translator, params)?;
        let loss = batch_loss(
            &mut g,
            &bound,
            &self.head,
            &self.classes,
            &self.images,
            &self.labels,
            self.temperature,
        )?;
        if with_grads {
            g.backward_into(loss, params)?;
        }
        g.value(loss).item()
    }

    /// Maximum relative error over every parameter coordinate.
    pub fn run(&self) -> Result<f64> {
        grad_check(|p, grads| self.loss(p, grads), &self.params, GRADCHECK_STEP)
    }
}

/// One named pass/fail line.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub expected: String,
    pub actual: String,
}

impl Check {
    fn new(name: &str, expected: &str, actual: String) -> Self {
        Check {
            name: name.into(),
            expected: expected.into(),
            actual,
        }
    }

    pub fn passed(&self) -> bool {
        self.expected == self.actual
    }
}

/// Reproduces the published table arithmetic from the embedded
/// per-dataset values.
pub fn fixture_checks() -> Result<Vec<Check>> {
    let fixture = ReferenceFixture::published();
    let ours = summarize(&fixture.ours_results()?)?;
    let original = summarize(&fixture.original_results()?)?;
    let deltas = compare_to_reference(&ours, &fixture)?;

    let mut checks = vec![
        Check::new("average base accuracy", "74.58", fmt2(ours.base_avg)),
        Check::new("average new accuracy", "76.00", fmt2(ours.new_avg)),
        Check::new("average generalization gap", "+1.43", fmt2_signed(ours.gap_avg)),
        Check::new("reference average base accuracy", "74.47", fmt2(original.base_avg)),
        Check::new("reference average new accuracy", "76.23", fmt2(original.new_avg)),
        Check::new("average base delta", "+0.11", fmt2_signed(deltas.average.delta_base)),
        Check::new("average new delta", "-0.23", fmt2_signed(deltas.average.delta_new)),
    ];
    let per_dataset = [
        ("Caltech101", "-0.36", "+0.21", "-1.43"),
        ("Oxford Flowers", "+0.80", "-0.40", "+6.70"),
        ("FGVC Aircraft", "+0.13", "-0.13", "+3.94"),
        ("Oxford Pets", "+0.05", "+0.07", "-0.38"),
        ("Food-101", "-0.08", "+0.05", "+1.83"),
        ("DTD", "+0.12", "-1.19", "-2.11"),
    ];
    for (row, (name, db, dn, gap)) in deltas.rows.iter().zip(per_dataset) {
        checks.push(Check::new(&format!("{name} base delta"), db, fmt2_signed(row.delta_base)));
        checks.push(Check::new(&format!("{name} new delta"), dn, fmt2_signed(row.delta_new)));
        checks.push(Check::new(&format!("{name} gap"), gap, fmt2_signed(row.gap)));
    }
    Ok(checks)
}
