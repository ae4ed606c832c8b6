//! Seeded stand-ins for the frozen image and text encoders.
//!
//! Image features are drawn around unit class centers. Class embeddings
//! are noisy copies of the centers after a fixed seeded linear map
//! `I + s·G/√d`, so text and image spaces disagree in a systematic,
//! learnable way and the zero-context classifier is imperfect. New-class centers are interpolations
//! of two base centers, so unseen classes are semantically close to seen
//! ones. Gaussian noise is isotropic with per-coordinate variance
//! `σ²/d`, which makes `σ` the expected noise norm regardless of `d`.

use std::collections::BTreeSet;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{gelu_scalar, Graph, Var, L2_EPS};
use crate::container::{self, Container};
use crate::error::{Error, Result};
use crate::seed::{self, Hasher64};
use crate::tensor::{matmul_raw, Tensor};
use crate::translator::gaussian_vec;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldConfig {
    pub d: usize,
    pub n_base: usize,
    pub n_new: usize,
    pub sigma_img: f64,
    pub sigma_text: f64,
    pub interp_lo: f64,
    pub interp_hi: f64,
    /// Strength of the fixed linear map `I + s·G/√d` applied to centers
    /// before class embeddings are drawn. 0 leaves centers untouched.
    pub text_misalign: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            d: 32,
            n_base: 60,
            n_new: 20,
            sigma_img: 0.1,
            sigma_text: 0.05,
            interp_lo: 0.3,
            interp_hi: 0.7,
            text_misalign: 3.0,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::contract("world dimension must be positive"));
        }
        if !(0.0 <= self.interp_lo && self.interp_lo <= self.interp_hi && self.interp_hi <= 1.0) {
            return Err(Error::contract(format!(
                "interpolation range [{}, {}] must satisfy 0 <= lo <= hi <= 1",
                self.interp_lo, self.interp_hi
            )));
        }
        if !(self.sigma_img >= 0.0 && self.sigma_text >= 0.0) || !self.sigma_img.is_finite() || !self.sigma_text.is_finite() {
            return Err(Error::contract("noise scales must be finite and non-negative"));
        }
        if !(self.text_misalign >= 0.0 && self.text_misalign.is_finite()) {
            return Err(Error::contract("text_misalign must be finite and non-negative"));
        }
        if self.n_base < 2 {
            return Err(Error::contract(format!(
                "need at least 2 base classes, got {}",
                self.n_base
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub config: WorldConfig,
    /// `[(n_base+n_new) × d]`, unit rows.
    pub centers: Tensor,
    /// `[(n_base+n_new) × d]`, unit rows.
    pub class_embeddings: Tensor,
    pub base_ids: Vec<usize>,
    pub new_ids: Vec<usize>,
    /// Parent base classes and mixing weight of each new class.
    pub parents: Vec<(usize, usize, f64)>,
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(L2_EPS);
    for x in v {
        *x /= n;
    }
}

fn noisy_unit(rng: &mut impl Rng, center: &[f64], sigma: f64) -> Vec<f64> {
    let d = center.len();
    if sigma == 0.0 {
        return center.to_vec();
    }
    let noise = gaussian_vec(rng, d, sigma / (d as f64).sqrt());
    let mut v: Vec<f64> = center.iter().zip(&noise).map(|(c, n)| c + n).collect();
    normalize(&mut v);
    v
}

pub fn build_world(config: &WorldConfig) -> Result<SyntheticWorld> {
    config.validate()?;
    let (d, nb, nn) = (config.d, config.n_base, config.n_new);
    let total = nb + nn;
    let mut centers = Vec::with_capacity(total * d);

    let mut rng = seed::rng_from(&[config.seed, seed::stream::WORLD, 0]);
    for _ in 0..nb {
        let mut v = gaussian_vec(&mut rng, d, 1.0);
        normalize(&mut v);
        centers.extend(v);
    }

    let mut pair_rng = seed::rng_from(&[config.seed, seed::stream::WORLD, 1]);
    let unique_pairs = nb * (nb - 1) / 2 >= nn;
    let mut used = BTreeSet::new();
    let mut parents = Vec::with_capacity(nn);
    for _ in 0..nn {
        let (a, b) = loop {
            let a = pair_rng.random_range(0..nb);
            let b = pair_rng.random_range(0..nb);
            if a == b {
                continue;
            }
            let key = (a.min(b), a.max(b));
            if unique_pairs && !used.insert(key) {
                continue;
            }
            break (a, b);
        };
        let lambda = if config.interp_hi > config.interp_lo {
            pair_rng.random_range(config.interp_lo..=config.interp_hi)
        } else {
            config.interp_lo
        };
        let mut v: Vec<f64> = (0..d)
            .map(|j| lambda * centers[a * d + j] + (1.0 - lambda) * centers[b * d + j])
            .collect();
        normalize(&mut v);
        centers.extend(v);
        parents.push((a, b, lambda));
    }

    let anchors = if config.text_misalign == 0.0 {
        centers.clone()
    } else {
        let mut rng = seed::rng_from(&[config.seed, seed::stream::WORLD, 3]);
        let mut map = gaussian_vec(&mut rng, d * d, config.text_misalign / (d as f64).sqrt());
        for i in 0..d {
            map[i * d + i] += 1.0;
        }
        let mut mapped = matmul_raw(&centers, &map, total, d, d);
        for row in mapped.chunks_mut(d) {
            normalize(row);
        }
        mapped
    };
    let mut emb = Vec::with_capacity(total * d);
    for c in 0..total {
        let mut rng = seed::rng_from(&[config.seed, seed::stream::WORLD, 2, c as u64]);
        emb.extend(noisy_unit(&mut rng, &anchors[c * d..(c + 1) * d], config.sigma_text));
    }

    Ok(SyntheticWorld {
        config: *config,
        centers: Tensor::new(vec![total, d], centers)?,
        class_embeddings: Tensor::new(vec![total, d], emb)?,
        base_ids: (0..nb).collect(),
        new_ids: (nb..total).collect(),
        parents,
    })
}

impl SyntheticWorld {
    pub fn num_classes(&self) -> usize {
        self.centers.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.config.d
    }

    fn check_class(&self, class_id: usize) -> Result<()> {
        if class_id >= self.num_classes() {
            return Err(Error::Index(format!(
                "class id {class_id} outside [0, {})",
                self.num_classes()
            )));
        }
        Ok(())
    }

    pub fn center(&self, class_id: usize) -> Result<&[f64]> {
        self.check_class(class_id)?;
        Ok(self.centers.row_slice(class_id))
    }

    pub fn class_embedding(&self, class_id: usize) -> Result<&[f64]> {
        self.check_class(class_id)?;
        Ok(self.class_embeddings.row_slice(class_id))
    }

    /// One image feature: `normalize(center + noise)`.
    pub fn sample_image(&self, class_id: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let c = self.center(class_id)?;
        let v = noisy_unit(rng, c, self.config.sigma_img);
        Tensor::new(vec![self.dim()], v)
    }

    pub fn checksum(&self) -> u64 {
        let mut h = Hasher64::new(0x3041d);
        h.write_tensor(&self.centers);
        h.write_tensor(&self.class_embeddings);
        h.finish()
    }
}

/// Frozen two-layer residual head standing in for the text encoder.
///
/// `text_feature = normalize(e + gelu(mean(ctx)·W1)·W2)`. With all-zero
/// context the correction vanishes and the output is the class embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenTextHead {
    pub w1: Tensor,
    pub w2: Tensor,
}

impl FrozenTextHead {
    pub fn new(d: usize, seed_value: u64) -> Result<Self> {
        let std = 1.0 / (d as f64).sqrt();
        let mut rng = seed::rng_from(&[seed_value, seed::stream::HEAD, 1]);
        let w1 = Tensor::new(vec![d, d], gaussian_vec(&mut rng, d * d, std))?;
        let mut rng = seed::rng_from(&[seed_value, seed::stream::HEAD, 2]);
        let w2 = Tensor::new(vec![d, d], gaussian_vec(&mut rng, d * d, std))?;
        Ok(FrozenTextHead { w1, w2 })
    }

    pub fn dim(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn checksum(&self) -> u64 {
        let mut h = Hasher64::new(0x7e47);
        h.write_tensor(&self.w1);
        h.write_tensor(&self.w2);
        h.finish()
    }

    /// Graph version; differentiable in `ctx` `[m×d]`, the head weights
    /// enter as constants. `class_emb` is a `[1×d]` node.
    pub fn text_feature_node(&self, g: &mut Graph, ctx: Var, class_emb: Var) -> Result<Var> {
        let d = self.dim();
        let cs = g.value(ctx).shape();
        if cs.len() != 2 || cs[1] != d {
            return Err(Error::dim(format!("context must be [m x {d}], got {cs:?}")));
        }
        if g.value(class_emb).shape() != [1, d] {
            return Err(Error::dim(format!(
                "class embedding must be [1 x {d}], got {:?}",
                g.value(class_emb).shape()
            )));
        }
        let w1 = g.constant(self.w1.clone())?;
        let w2 = g.constant(self.w2.clone())?;
        let pooled = g.mean_rows(ctx)?;
        let h = g.matmul(pooled, w1)?;
        let h = g.gelu(h)?;
        let delta = g.matmul(h, w2)?;
        let sum = g.add(class_emb, delta)?;
        g.l2_normalize(sum, L2_EPS)
    }

    /// Plain evaluation of the text feature for one class.
    pub fn text_feature(&self, ctx: &Tensor, class_emb: &Tensor) -> Result<Tensor> {
        let d = self.dim();
        if ctx.shape().len() != 2 || ctx.shape()[1] != d || ctx.shape()[0] == 0 {
            return Err(Error::dim(format!("context must be [m x {d}], got {:?}", ctx.shape())));
        }
        if class_emb.len() != d {
            return Err(Error::dim(format!("class embedding must have {d} values, got {:?}", class_emb.shape())));
        }
        let m = ctx.shape()[0];
        let mut pooled = vec![0.0; d];
        for r in 0..m {
            for (p, v) in pooled.iter_mut().zip(ctx.row_slice(r)) {
                *p += v;
            }
        }
        for p in &mut pooled {
            *p /= m as f64;
        }
        let h: Vec<f64> = matmul_raw(&pooled, self.w1.data(), 1, d, d)
            .into_iter()
            .map(gelu_scalar)
            .collect();
        let delta = matmul_raw(&h, self.w2.data(), 1, d, d);
        let mut out: Vec<f64> = class_emb.data().iter().zip(&delta).map(|(e, x)| e + x).collect();
        normalize(&mut out);
        Tensor::new(class_emb.shape().to_vec(), out)
    }
}

/// A labeled table of embeddings, one row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub labels: Vec<String>,
    pub embeddings: Tensor,
}

const EMBEDDINGS: &str = "embeddings";

pub fn save_embeddings(path: &Path, table: &EmbeddingTable) -> Result<()> {
    if table.embeddings.shape().len() != 2 || table.embeddings.shape()[0] != table.labels.len() {
        return Err(Error::dim(format!(
            "{} labels for embedding table of shape {:?}",
            table.labels.len(),
            table.embeddings.shape()
        )));
    }
    if let Some(l) = table.labels.iter().find(|l| l.contains('\n')) {
        return Err(Error::contract(format!("label {l:?} contains a newline")));
    }
    let c = Container {
        tensors: vec![(EMBEDDINGS.to_string(), table.embeddings.clone())],
        text: table.labels.join("\n"),
        round: 0,
    };
    container::write_file(path, &c)
}

/// Reads an embedding table. Rows whose norm is off unit by more than
/// 1e-6 are normalized.
pub fn load_embeddings(path: &Path) -> Result<EmbeddingTable> {
    let c = container::read_file(path)?;
    embeddings_from_container(c)
}

pub fn embeddings_from_container(c: Container) -> Result<EmbeddingTable> {
    let [(name, mut emb)]: [(String, Tensor); 1] = c
        .tensors
        .try_into()
        .map_err(|t: Vec<_>| Error::format(0, format!("embedding file holds {} tensors, expected 1", t.len())))?;
    if name != EMBEDDINGS || emb.shape().len() != 2 {
        return Err(Error::format(0, format!("expected a 2-d `{EMBEDDINGS}` tensor, found `{name}` {:?}", emb.shape())));
    }
    let labels: Vec<String> = if c.text.is_empty() {
        Vec::new()
    } else {
        c.text.split('\n').map(str::to_string).collect()
    };
    let rows = emb.shape()[0];
    if labels.len() != rows {
        return Err(Error::format(0, format!("{} labels for {rows} embedding rows", labels.len())));
    }
    let d = emb.shape()[1];
    for r in 0..rows {
        let row = &mut emb.data_mut()[r * d..(r + 1) * d];
        if let Some(j) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data {
                row: r,
                message: format!("non-finite value in column {j}"),
            });
        }
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-6 {
            normalize(row);
        }
    }
    Ok(EmbeddingTable { labels, embeddings: emb })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn row_norms(t: &Tensor) -> Vec<f64> {
        (0..t.rows())
            .map(|r| t.row_slice(r).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    }

    #[test]
    fn zero_text_noise_gives_centers() {
        let w = build_world(&WorldConfig {
            sigma_text: 0.0,
            text_misalign: 0.0,
            ..WorldConfig::default()
        })
        .unwrap();
        assert!(w.class_embeddings.bit_eq(&w.centers));
    }

    #[test]
    fn misalignment_moves_embeddings_but_keeps_unit_norm() {
        let aligned = build_world(&WorldConfig {
            text_misalign: 0.0,
            ..WorldConfig::default()
        })
        .unwrap();
        let w = build_world(&WorldConfig::default()).unwrap();
        assert!(w.centers.bit_eq(&aligned.centers));
        let mut mean_cos = 0.0;
        for c in 0..w.num_classes() {
            let e = w.class_embedding(c).unwrap();
            let n: f64 = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
            mean_cos += e.iter().zip(w.center(c).unwrap()).map(|(a, b)| a * b).sum::<f64>();
        }
        mean_cos /= w.num_classes() as f64;
        assert!(mean_cos < 0.6, "mean cosine {mean_cos}");
    }

    #[test]
    fn world_is_seed_determined_with_unit_rows() {
        let cfg = WorldConfig::default();
        let a = build_world(&cfg).unwrap();
        let b = build_world(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.centers.shape(), &[80, 32]);
        for n in row_norms(&a.centers).into_iter().chain(row_norms(&a.class_embeddings)) {
            assert!((n - 1.0).abs() < 1e-9);
        }
        let base: BTreeSet<_> = a.base_ids.iter().collect();
        assert!(a.new_ids.iter().all(|i| !base.contains(i)));
        let c = build_world(&WorldConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.centers, c.centers);
    }

    #[test]
    fn new_centers_in_parent_cone() {
        let w = build_world(&WorldConfig::default()).unwrap();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        for (k, &(a, b, lambda)) in w.parents.iter().enumerate() {
            assert!(a != b && lambda > 0.0 && lambda < 1.0);
            let c = w.center(w.new_ids[k]).unwrap();
            assert!(dot(c, w.center(a).unwrap()) > 0.0);
            assert!(dot(c, w.center(b).unwrap()) > 0.0);
        }
    }

    #[test]
    fn too_few_base_classes_rejected() {
        let cfg = WorldConfig {
            n_base: 1,
            ..WorldConfig::default()
        };
        assert!(matches!(build_world(&cfg), Err(Error::Contract(_))));
        let cfg = WorldConfig {
            interp_lo: 0.8,
            interp_hi: 0.2,
            ..WorldConfig::default()
        };
        assert!(build_world(&cfg).is_err());
    }

    #[test]
    fn sample_image_examples() {
        let w0 = build_world(&WorldConfig {
            sigma_img: 0.0,
            ..WorldConfig::default()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = w0.sample_image(3, &mut rng).unwrap();
        assert_eq!(x.data(), w0.center(3).unwrap());

        let w = build_world(&WorldConfig::default()).unwrap();
        let rng = ChaCha8Rng::seed_from_u64(9);
        let a = w.sample_image(5, &mut rng.clone()).unwrap();
        let b = w.sample_image(5, &mut rng.clone()).unwrap();
        assert!(a.bit_eq(&b));

        assert!(matches!(w.sample_image(80, &mut rng.clone()), Err(Error::Index(_))));
    }

    #[test]
    fn monte_carlo_cosine_to_center() {
        let w = build_world(&WorldConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let center = w.center(0).unwrap();
        let mean: f64 = (0..1000)
            .map(|_| {
                let x = w.sample_image(0, &mut rng).unwrap();
                x.data().iter().zip(center).map(|(a, b)| a * b).sum::<f64>()
            })
            .sum::<f64>()
            / 1000.0;
        assert!(mean > 0.99, "mean cosine {mean}");
    }

    #[test]
    fn zero_context_identity_and_unit_norm() {
        let w = build_world(&WorldConfig::default()).unwrap();
        let head = FrozenTextHead::new(32, 11).unwrap();
        let zero = Tensor::zeros(&[4, 32]);
        for c in 0..w.num_classes() {
            let e = Tensor::row(w.class_embedding(c).unwrap());
            let t = head.text_feature(&zero, &e).unwrap();
            assert!(t.max_abs_diff(&e) < 1e-12);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ctx = Tensor::new(vec![4, 32], gaussian_vec(&mut rng, 128, 1.0)).unwrap();
        let e = Tensor::row(w.class_embedding(7).unwrap());
        let t1 = head.text_feature(&ctx, &e).unwrap();
        let t2 = head.text_feature(&ctx, &e).unwrap();
        assert!(t1.bit_eq(&t2));
        assert!((t1.norm() - 1.0).abs() < 1e-12);

        // Graph and plain evaluation agree.
        let mut g = Graph::new();
        let cv = g.constant(ctx.clone()).unwrap();
        let ev = g.constant(e.clone()).unwrap();
        let tv = head.text_feature_node(&mut g, cv, ev).unwrap();
        assert!(g.value(tv).max_abs_diff(&t1) < 1e-15);

        assert!(matches!(head.text_feature(&Tensor::zeros(&[4, 31]), &e), Err(Error::Dimension(_))));
    }

    #[test]
    fn embedding_round_trip_and_normalization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.ftpg");
        let w = build_world(&WorldConfig::default()).unwrap();
        let table = EmbeddingTable {
            labels: (0..80).map(|i| format!("class_{i}")).collect(),
            embeddings: w.class_embeddings.clone(),
        };
        save_embeddings(&path, &table).unwrap();
        let back = load_embeddings(&path).unwrap();
        assert_eq!(back.labels, table.labels);
        assert!(back.embeddings.bit_eq(&table.embeddings));

        let scaled = EmbeddingTable {
            labels: vec!["a".into(), "b".into()],
            embeddings: Tensor::from_rows(&[vec![0.0, 2.0], vec![0.6, 0.8]]).unwrap(),
        };
        save_embeddings(&path, &scaled).unwrap();
        let back = load_embeddings(&path).unwrap();
        assert_eq!(back.embeddings.row_slice(0), &[0.0, 1.0]);
        assert_eq!(back.embeddings.row_slice(1), &[0.6, 0.8]);

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load_embeddings(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn non_finite_embedding_reports_row() {
        let c = Container {
            tensors: vec![(
                EMBEDDINGS.into(),
                Tensor::new(vec![2, 2], vec![1.0, 0.0, f64::NAN, 1.0]).unwrap(),
            )],
            text: "a\nb".into(),
            round: 0,
        };
        match embeddings_from_container(c) {
            Err(Error::Data { row, .. }) => assert_eq!(row, 1),
            other => panic!("unexpected {other:?}"),
        }
    }
}
