//! Synthetic preference datasets.
//!
//! Each prompt owns a small Gaussian mixture in sample space. The style
//! dataset draws a rejected sample `y_l` from that mixture and labels its
//! affine restyling `y_w = s R y_l + shift` as preferred. The human-preference
//! dataset instead pits a draw from the mixture against a draw from a
//! perturbed copy and lets a seeded noisy scorer pick the winner.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// One preference example. Field order is the on-disk order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt_id: usize,
    pub prompt_features: Vec<f64>,
    pub y_w: Vec<f64>,
    pub y_l: Vec<f64>,
}

/// Gaussian component with a row-major covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub mean: Vec<f64>,
    pub cov: Vec<f64>,
}

impl Component {
    pub fn isotropic(mean: Vec<f64>, var: f64) -> Self {
        let d = mean.len();
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            cov[i * d + i] = var;
        }
        Self { mean, cov }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn cov_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_row_slice(d, d, &self.cov)
    }

    fn cholesky(&self) -> Result<DMatrix<f64>> {
        let c = self.cov_matrix();
        if (&c - c.transpose()).amax() > 1e-12 {
            return Err(Error::InvalidRange(
                "component covariance is not symmetric".into(),
            ));
        }
        c.cholesky().map(|ch| ch.l()).ok_or_else(|| {
            Error::InvalidRange("component covariance is not positive definite".into())
        })
    }
}

/// Prompt-conditional base distribution: one equally weighted mixture per prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseConfig {
    pub prompts: Vec<Vec<Component>>,
    /// Length of the seeded random part of each prompt's feature vector.
    pub feature_noise_dim: usize,
    pub feature_seed: u64,
}

impl Default for BaseConfig {
    /// Four prompts in the plane, each a two-component mixture.
    fn default() -> Self {
        let means = [
            [[-2.0, 2.0], [-1.0, 3.0]],
            [[2.0, 2.0], [3.0, 1.0]],
            [[2.0, -2.0], [1.0, -3.0]],
            [[-2.0, -2.0], [-3.0, -1.0]],
        ];
        Self {
            prompts: means
                .iter()
                .map(|pair| {
                    pair.iter()
                        .map(|m| Component::isotropic(m.to_vec(), 0.09))
                        .collect()
                })
                .collect(),
            feature_noise_dim: 2,
            feature_seed: 7,
        }
    }
}

impl BaseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.prompts.is_empty() {
            return Err(Error::Config("at least one prompt is required".into()));
        }
        let d = self.dim();
        for (p, comps) in self.prompts.iter().enumerate() {
            if comps.is_empty() {
                return Err(Error::Config(format!(
                    "prompt {p} has no mixture components"
                )));
            }
            for c in comps {
                check_dim(d, c.mean.len())?;
                check_dim(d * d, c.cov.len())?;
                c.cholesky()?;
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.prompts
            .first()
            .and_then(|c| c.first())
            .map_or(0, Component::dim)
    }

    pub fn num_prompts(&self) -> usize {
        self.prompts.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.num_prompts() + self.feature_noise_dim
    }

    pub fn components(&self, prompt_id: usize) -> Result<&[Component]> {
        self.prompts
            .get(prompt_id)
            .map(Vec::as_slice)
            .ok_or(Error::UnknownPrompt(prompt_id))
    }

    /// One-hot prompt label followed by a fixed pseudo-random vector.
    pub fn prompt_features(&self, prompt_id: usize) -> Result<Vec<f64>> {
        self.components(prompt_id)?;
        let mut f = vec![0.0; self.num_prompts()];
        f[prompt_id] = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(self.feature_seed);
        rng.set_stream(prompt_id as u64);
        f.extend((0..self.feature_noise_dim).map(|_| rng.sample::<f64, _>(StandardNormal)));
        Ok(f)
    }

    /// `n` draws from the mixture of `prompt_id`.
    pub fn sample(&self, prompt_id: usize, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sampler = MixtureSampler::new(self.components(prompt_id)?)?;
        Ok((0..n).map(|_| sampler.draw(&mut rng)).collect())
    }
}

/// Free-function form of [`BaseConfig::sample`].
pub fn sample_base(
    base: &BaseConfig,
    prompt_id: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    base.sample(prompt_id, n, seed)
}

struct MixtureSampler {
    means: Vec<DVector<f64>>,
    factors: Vec<DMatrix<f64>>,
}

impl MixtureSampler {
    fn new(components: &[Component]) -> Result<Self> {
        Ok(Self {
            means: components
                .iter()
                .map(|c| DVector::from_column_slice(&c.mean))
                .collect(),
            factors: components
                .iter()
                .map(Component::cholesky)
                .collect::<Result<_>>()?,
        })
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let k = rng.random_range(0..self.means.len());
        let d = self.means[k].len();
        let z = DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
        (&self.means[k] + &self.factors[k] * z).as_slice().to_vec()
    }
}

/// Affine restyling `y -> scale * R(rotation) * y + shift`, rotating the
/// first two coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleTransform {
    rotation: f64,
    scale: f64,
    shift: Vec<f64>,
}

impl StyleTransform {
    pub fn new(rotation: f64, scale: f64, shift: Vec<f64>) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidTransform(format!(
                "scale must be positive, got {scale}"
            )));
        }
        if !rotation.is_finite() || shift.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidTransform("non-finite parameters".into()));
        }
        if shift.len() < 2 {
            return Err(Error::InvalidTransform(format!(
                "sample space must have at least 2 dimensions, got {}",
                shift.len()
            )));
        }
        let (sin, cos) = rotation.sin_cos();
        let identity_like = sin.abs() < 1e-12
            && cos > 0.0
            && (scale - 1.0).abs() < 1e-12
            && shift.iter().all(|x| x.abs() < 1e-12);
        if identity_like {
            return Err(Error::InvalidTransform(
                "transform is the identity; preferred and rejected samples would coincide".into(),
            ));
        }
        Ok(Self {
            rotation,
            scale,
            shift,
        })
    }

    pub fn rotation(&self) -> f64 {
        self.rotation
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn shift(&self) -> &[f64] {
        &self.shift
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    /// Linear part `scale * R` as a matrix.
    pub fn linear(&self) -> DMatrix<f64> {
        let d = self.dim();
        let mut m = DMatrix::identity(d, d) * self.scale;
        let (sin, cos) = self.rotation.sin_cos();
        m[(0, 0)] = self.scale * cos;
        m[(0, 1)] = -self.scale * sin;
        m[(1, 0)] = self.scale * sin;
        m[(1, 1)] = self.scale * cos;
        m
    }

    pub fn apply(&self, y: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), y.len())?;
        let (sin, cos) = self.rotation.sin_cos();
        let mut out: Vec<f64> = y.iter().map(|v| self.scale * v).collect();
        out[0] = self.scale * (cos * y[0] - sin * y[1]);
        out[1] = self.scale * (sin * y[0] + cos * y[1]);
        for (o, s) in out.iter_mut().zip(&self.shift) {
            *o += s;
        }
        Ok(out)
    }

    pub fn inverse(&self, y: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), y.len())?;
        let z: Vec<f64> = y
            .iter()
            .zip(&self.shift)
            .map(|(v, s)| (v - s) / self.scale)
            .collect();
        let (sin, cos) = self.rotation.sin_cos();
        let mut out = z.clone();
        out[0] = cos * z[0] + sin * z[1];
        out[1] = -sin * z[0] + cos * z[1];
        Ok(out)
    }

    /// Image of a Gaussian component under the transform.
    pub fn apply_component(&self, c: &Component) -> Result<Component> {
        let a = self.linear();
        let mean = self.apply(&c.mean)?;
        let cov = &a * c.cov_matrix() * a.transpose();
        let cov = (&cov + cov.transpose()) * 0.5;
        Ok(Component {
            mean,
            cov: cov.transpose().as_slice().to_vec(),
        })
    }
}

/// Pairs `(T(y_l), y_l)` with `y_l` drawn from a uniformly chosen prompt.
pub fn build_style_dataset(
    base: &BaseConfig,
    transform: &StyleTransform,
    n_pairs: usize,
    seed: u64,
) -> Result<Vec<PreferencePair>> {
    if n_pairs == 0 {
        return Err(Error::InvalidRange("n_pairs must be at least 1".into()));
    }
    base.validate()?;
    check_dim(base.dim(), transform.dim())?;
    let samplers: Vec<MixtureSampler> = base
        .prompts
        .iter()
        .map(|c| MixtureSampler::new(c))
        .collect::<Result<_>>()?;
    let features: Vec<Vec<f64>> = (0..base.num_prompts())
        .map(|p| base.prompt_features(p))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_pairs)
        .map(|_| {
            let prompt_id = rng.random_range(0..base.num_prompts());
            let y_l = samplers[prompt_id].draw(&mut rng);
            let y_w = transform.apply(&y_l)?;
            Ok(PreferencePair {
                prompt_id,
                prompt_features: features[prompt_id].clone(),
                y_w,
                y_l,
            })
        })
        .collect()
}

/// Settings of the human-preference toy dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanPrefConfig {
    /// Offset added to every component mean of the rejected-side mixture.
    pub perturbation: Vec<f64>,
    /// Factor applied to the rejected-side covariances.
    pub spread: f64,
    /// Standard deviation of the scorer's seeded noise.
    pub scorer_noise: f64,
}

impl Default for HumanPrefConfig {
    fn default() -> Self {
        Self {
            perturbation: vec![0.8, -0.4],
            spread: 2.0,
            scorer_noise: 0.5,
        }
    }
}

/// Log-density-style score of `y` under the high-reward mixture of a prompt:
/// the largest negative squared Mahalanobis distance to any component.
pub fn mixture_score(components: &[Component], y: &[f64]) -> Result<f64> {
    let y = DVector::from_column_slice(y);
    let mut best = f64::NEG_INFINITY;
    for c in components {
        check_dim(c.dim(), y.len())?;
        let ch = c.cov_matrix().cholesky().ok_or_else(|| {
            Error::InvalidRange("component covariance is not positive definite".into())
        })?;
        let diff = &y - DVector::from_column_slice(&c.mean);
        let sol = ch.solve(&diff);
        best = best.max(-diff.dot(&sol));
    }
    Ok(best)
}

/// One candidate from each of the high-reward and perturbed mixtures; the
/// candidate with the higher noisy score is the winner.
pub fn build_human_pref_dataset(
    base: &BaseConfig,
    hp: &HumanPrefConfig,
    n_pairs: usize,
    seed: u64,
) -> Result<Vec<PreferencePair>> {
    if n_pairs == 0 {
        return Err(Error::InvalidRange("n_pairs must be at least 1".into()));
    }
    base.validate()?;
    check_dim(base.dim(), hp.perturbation.len())?;
    if !(hp.spread > 0.0 && hp.scorer_noise >= 0.0) {
        return Err(Error::Config(
            "spread must be positive and scorer_noise non-negative".into(),
        ));
    }
    let mut good = Vec::new();
    let mut bad = Vec::new();
    for comps in &base.prompts {
        good.push(MixtureSampler::new(comps)?);
        let shifted: Vec<Component> = comps
            .iter()
            .map(|c| Component {
                mean: c
                    .mean
                    .iter()
                    .zip(&hp.perturbation)
                    .map(|(m, p)| m + p)
                    .collect(),
                cov: c.cov.iter().map(|v| v * hp.spread).collect(),
            })
            .collect();
        bad.push(MixtureSampler::new(&shifted)?);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(n_pairs);
    while pairs.len() < n_pairs {
        let prompt_id = rng.random_range(0..base.num_prompts());
        let a = good[prompt_id].draw(&mut rng);
        let b = bad[prompt_id].draw(&mut rng);
        let comps = base.components(prompt_id)?;
        let noise_a: f64 = rng.sample(StandardNormal);
        let noise_b: f64 = rng.sample(StandardNormal);
        let sa = mixture_score(comps, &a)? + hp.scorer_noise * noise_a;
        let sb = mixture_score(comps, &b)? + hp.scorer_noise * noise_b;
        if sa == sb {
            continue;
        }
        let (y_w, y_l) = if sa > sb { (a, b) } else { (b, a) };
        pairs.push(PreferencePair {
            prompt_id,
            prompt_features: base.prompt_features(prompt_id)?,
            y_w,
            y_l,
        });
    }
    Ok(pairs)
}

/// Writes one JSON object per line.
pub fn save_dataset(pairs: &[PreferencePair], path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for pair in pairs {
        if pair
            .y_w
            .iter()
            .chain(&pair.y_l)
            .chain(&pair.prompt_features)
            .any(|x| !x.is_finite())
        {
            return Err(Error::InvalidRange(format!(
                "pair for prompt {} holds a non-finite value",
                pair.prompt_id
            )));
        }
        let line = serde_json::to_string(pair).map_err(std::io::Error::other)?;
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a dataset written by [`save_dataset`]. Blank lines are skipped.
pub fn load_dataset(path: &Path) -> Result<Vec<PreferencePair>> {
    let reader = BufReader::new(File::open(path)?);
    let mut pairs: Vec<PreferencePair> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            msg,
        };
        let pair: PreferencePair =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if pair.y_w.len() != pair.y_l.len() {
            return Err(parse_err(format!(
                "y_w has {} entries but y_l has {}",
                pair.y_w.len(),
                pair.y_l.len()
            )));
        }
        if pair.y_w == pair.y_l {
            return Err(parse_err(
                "preferred and rejected samples are identical".into(),
            ));
        }
        if let Some(first) = pairs.first() {
            if first.y_w.len() != pair.y_w.len()
                || first.prompt_features.len() != pair.prompt_features.len()
            {
                return Err(parse_err("dimensions differ from earlier lines".into()));
            }
        }
        pairs.push(pair);
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

    fn style() -> StyleTransform {
        StyleTransform::new(FRAC_PI_4, 1.2, vec![1.0, -1.0]).unwrap()
    }

    #[test]
    fn sampling_basics() {
        let base = BaseConfig::default();
        assert!(base.sample(0, 0, 1).unwrap().is_empty());
        assert_eq!(base.sample(1, 5, 3).unwrap(), base.sample(1, 5, 3).unwrap());
        assert!(matches!(base.sample(4, 1, 0), Err(Error::UnknownPrompt(4))));
    }

    #[test]
    fn sample_mean_converges() {
        let base = BaseConfig {
            prompts: vec![vec![Component::isotropic(vec![3.0, 3.0], 1e-4)]],
            feature_noise_dim: 0,
            feature_seed: 0,
        };
        let xs = sample_base(&base, 0, 1000, 5).unwrap();
        for k in 0..2 {
            let mean = xs.iter().map(|x| x[k]).sum::<f64>() / 1000.0;
            assert!((mean - 3.0).abs() < 0.1);
        }
    }

    #[test]
    fn prompt_features_layout() {
        let base = BaseConfig::default();
        let f = base.prompt_features(2).unwrap();
        assert_eq!(f.len(), 6);
        assert_eq!(&f[..4], &[0.0, 0.0, 1.0, 0.0]);
        assert_eq!(f, base.prompt_features(2).unwrap());
        assert_ne!(f[4..], base.prompt_features(1).unwrap()[4..]);
    }

    #[test]
    fn transform_by_hand() {
        let t = StyleTransform::new(FRAC_PI_2, 1.0, vec![0.0, 0.0]).unwrap();
        let y = t.apply(&[1.0, 0.0]).unwrap();
        assert!(y[0].abs() < 1e-15 && (y[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn identity_and_invalid_transforms_rejected() {
        assert!(StyleTransform::new(0.0, 1.0, vec![0.0, 0.0]).is_err());
        assert!(StyleTransform::new(2.0 * std::f64::consts::PI, 1.0, vec![0.0, 0.0]).is_err());
        assert!(StyleTransform::new(0.3, 0.0, vec![0.0, 0.0]).is_err());
        assert!(StyleTransform::new(0.3, -1.0, vec![0.0, 0.0]).is_err());
        assert!(StyleTransform::new(0.3, 1.0, vec![0.0]).is_err());
        // pure rotation by pi is not the identity
        assert!(StyleTransform::new(std::f64::consts::PI, 1.0, vec![0.0, 0.0]).is_ok());
    }

    #[test]
    fn styled_component_matches_empirical_moments() {
        let c = Component {
            mean: vec![1.0, 2.0],
            cov: vec![0.5, 0.1, 0.1, 0.3],
        };
        let styled = style().apply_component(&c).unwrap();
        let base = BaseConfig {
            prompts: vec![vec![c]],
            feature_noise_dim: 0,
            feature_seed: 0,
        };
        let ys: Vec<Vec<f64>> = base
            .sample(0, 200_000, 1)
            .unwrap()
            .iter()
            .map(|y| style().apply(y).unwrap())
            .collect();
        let n = ys.len() as f64;
        let mean: Vec<f64> = (0..2)
            .map(|k| ys.iter().map(|y| y[k]).sum::<f64>() / n)
            .collect();
        for (m, s) in mean.iter().zip(&styled.mean) {
            assert!((m - s).abs() < 0.01);
        }
        for a in 0..2 {
            for b in 0..2 {
                let cov = ys
                    .iter()
                    .map(|y| (y[a] - mean[a]) * (y[b] - mean[b]))
                    .sum::<f64>()
                    / (n - 1.0);
                assert!((cov - styled.cov[a * 2 + b]).abs() < 0.01);
            }
        }
    }

    #[test]
    fn style_dataset_structure() {
        let base = BaseConfig::default();
        let t = style();
        let ds = build_style_dataset(&base, &t, 50, 4).unwrap();
        assert_eq!(ds.len(), 50);
        for p in &ds {
            assert_eq!(p.y_w, t.apply(&p.y_l).unwrap());
            assert_eq!(
                p.prompt_features,
                base.prompt_features(p.prompt_id).unwrap()
            );
        }
        assert_eq!(ds, build_style_dataset(&base, &t, 50, 4).unwrap());
        assert!(build_style_dataset(&base, &t, 0, 4).is_err());
    }

    #[test]
    fn prompt_coverage() {
        let base = BaseConfig::default();
        let n = 400;
        let ds = build_style_dataset(&base, &style(), n, 11).unwrap();
        let p = 1.0 / base.num_prompts() as f64;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        for id in 0..base.num_prompts() {
            let count = ds.iter().filter(|x| x.prompt_id == id).count() as f64;
            assert!(count > 0.0);
            assert!((count - n as f64 * p).abs() < 5.0 * sd);
        }
    }

    #[test]
    fn human_pref_winners_score_higher_on_average() {
        let base = BaseConfig::default();
        let ds = build_human_pref_dataset(&base, &HumanPrefConfig::default(), 500, 3).unwrap();
        let mut better = 0;
        for p in &ds {
            let comps = base.components(p.prompt_id).unwrap();
            if mixture_score(comps, &p.y_w).unwrap() > mixture_score(comps, &p.y_l).unwrap() {
                better += 1;
            }
        }
        assert!(better > 400, "{better}");
    }

    #[test]
    fn empty_and_single_line_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        save_dataset(&[], &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap().len(), 0);
        assert!(load_dataset(&path).unwrap().is_empty());

        let pair = PreferencePair {
            prompt_id: 3,
            prompt_features: vec![0.0, 1.0],
            y_w: vec![0.1, 0.2],
            y_l: vec![-0.5, 1e-300],
        };
        save_dataset(std::slice::from_ref(&pair), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "{\"prompt_id\":3,\"prompt_features\":[0.0,1.0],\"y_w\":[0.1,0.2],\"y_l\":[-0.5,1e-300]}\n"
        );
        assert_eq!(load_dataset(&path).unwrap(), vec![pair]);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"prompt_id\":0,\"prompt_features\":[],\"y_w\":[1.0],\"y_l\":[2.0]}\n\n{oops}\n",
        )
        .unwrap();
        match load_dataset(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    fn pair_strategy() -> impl Strategy<Value = PreferencePair> {
        let v = || prop::collection::vec(any::<f64>().prop_filter("finite", |x| x.is_finite()), 2);
        (0usize..10, v(), v(), v())
            .prop_filter("distinct", |(_, _, w, l)| w != l)
            .prop_map(|(prompt_id, prompt_features, y_w, y_l)| PreferencePair {
                prompt_id,
                prompt_features,
                y_w,
                y_l,
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn transform_inverse_recovers_input(
            rot in -10.0f64..10.0,
            scale in 0.1f64..5.0,
            sx in -5.0f64..5.0,
            sy in -5.0f64..5.0,
            y0 in -10.0f64..10.0,
            y1 in -10.0f64..10.0,
        ) {
            prop_assume!((scale - 1.0).abs() > 1e-9 || sx.abs() > 1e-9);
            let t = StyleTransform::new(rot, scale, vec![sx, sy]).unwrap();
            let back = t.inverse(&t.apply(&[y0, y1]).unwrap()).unwrap();
            prop_assert!((back[0] - y0).abs() < 1e-9 && (back[1] - y1).abs() < 1e-9);
        }

        #[test]
        fn dataset_round_trip(pairs in prop::collection::vec(pair_strategy(), 0..1000)) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("rt.jsonl");
            save_dataset(&pairs, &path).unwrap();
            let back = load_dataset(&path).unwrap();
            prop_assert_eq!(back.len(), pairs.len());
            for (a, b) in back.iter().zip(&pairs) {
                prop_assert_eq!(a.prompt_id, b.prompt_id);
                for (x, y) in a.y_w.iter().chain(&a.y_l).chain(&a.prompt_features)
                    .zip(b.y_w.iter().chain(&b.y_l).chain(&b.prompt_features)) {
                    prop_assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
    }
}
