//! Synthetic dataset generation with planted style structure.
//!
//! Every node belongs to a style; its features are the style prototype plus
//! Gaussian noise. Outfits are item sets whose styles are pairwise
//! compatible per a symmetric style table; the relation graph connects every
//! within-outfit pair of the training outfits. Test outfits and questions
//! draw from the same item universe but never duplicate a training outfit,
//! so their context comes from training co-occurrences only.
//!
//! The default noise scale leaves prototype distance over noise near 1.5:
//! single items are hard to classify from features alone, which is what
//! makes relational context genuinely informative.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{FitbQuestion, Outfit};
use crate::numeric::Matrix;

use super::text;

#[derive(Debug, Error)]
pub enum SyntheticError {
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error("infeasible synthetic config: {0}")]
    InfeasibleConfig(String),
    #[error("could not parse synthetic config: {0}")]
    BadConfigFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Text(#[from] text::TextError),
}

/// Generator parameters. Deserializable from TOML; omitted `noise_scale`
/// and `compatibility` derive from the configured dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_styles: usize,
    pub nodes_per_style: usize,
    pub feature_dim: usize,
    /// Per-dimension standard deviation of the feature noise. Negative
    /// means "derive from `feature_dim`".
    #[serde(default = "unset_noise")]
    pub noise_scale: f64,
    /// Symmetric style-compatibility table, `compatibility[a][b]`. Empty
    /// means "derive a two-block table over `num_styles`".
    #[serde(default)]
    pub compatibility: Vec<Vec<bool>>,
    pub outfit_size_min: usize,
    pub outfit_size_max: usize,
    pub num_train_outfits: usize,
    pub num_valid_outfits: usize,
    pub num_invalid_outfits: usize,
    pub num_questions: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        let feature_dim = 32;
        Self {
            num_styles: 8,
            nodes_per_style: 250,
            feature_dim,
            noise_scale: default_noise_scale(feature_dim),
            compatibility: two_block_table(8),
            outfit_size_min: 3,
            outfit_size_max: 6,
            num_train_outfits: 1500,
            num_valid_outfits: 500,
            num_invalid_outfits: 500,
            num_questions: 1000,
            seed: 0,
        }
    }
}

/// Noise scale putting expected prototype distance over noise near 1.5.
pub fn default_noise_scale(feature_dim: usize) -> f64 {
    (2.0 * feature_dim as f64).sqrt() / 1.5
}

fn unset_noise() -> f64 {
    -1.0
}

/// Two mutually incompatible style blocks, each internally compatible
/// (including self pairs).
pub fn two_block_table(num_styles: usize) -> Vec<Vec<bool>> {
    let half = num_styles.div_ceil(2);
    (0..num_styles)
        .map(|a| (0..num_styles).map(|b| (a < half) == (b < half)).collect())
        .collect()
}

impl SyntheticConfig {
    pub fn num_nodes(&self) -> usize {
        self.num_styles * self.nodes_per_style
    }

    pub fn from_toml_str(s: &str) -> Result<Self, SyntheticError> {
        let cfg: SyntheticConfig =
            toml::from_str(s).map_err(|e| SyntheticError::BadConfigFile(e.to_string()))?;
        let cfg = cfg.normalized();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Fills the derived fields left unset by a partial config.
    pub fn normalized(mut self) -> Self {
        if self.compatibility.is_empty() {
            self.compatibility = two_block_table(self.num_styles);
        }
        if self.noise_scale < 0.0 {
            self.noise_scale = default_noise_scale(self.feature_dim);
        }
        self
    }

    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<Self, SyntheticError> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), SyntheticError> {
        let fail = |msg: String| Err(SyntheticError::InvalidConfig(msg));
        if self.num_styles == 0 || self.nodes_per_style == 0 || self.feature_dim == 0 {
            return fail("styles, nodes per style and feature dim must be positive".into());
        }
        if !(self.noise_scale >= 0.0) {
            return fail(format!("noise scale {} must be non-negative", self.noise_scale));
        }
        if self.compatibility.len() != self.num_styles
            || self.compatibility.iter().any(|r| r.len() != self.num_styles)
        {
            return fail(format!(
                "compatibility table must be {0}x{0}",
                self.num_styles
            ));
        }
        for a in 0..self.num_styles {
            for b in 0..self.num_styles {
                if self.compatibility[a][b] != self.compatibility[b][a] {
                    return fail(format!("compatibility table asymmetric at ({a}, {b})"));
                }
            }
        }
        if self.outfit_size_min < 2 || self.outfit_size_max > 8 {
            return fail(format!(
                "outfit sizes must lie in [2, 8], got [{}, {}]",
                self.outfit_size_min, self.outfit_size_max
            ));
        }
        if self.outfit_size_min > self.outfit_size_max {
            return fail("outfit size min exceeds max".into());
        }
        Ok(())
    }

    fn compatible(&self, a: usize, b: usize) -> bool {
        self.compatibility[a][b]
    }

    fn style_of(&self, node: usize) -> usize {
        node / self.nodes_per_style
    }
}

/// Paths of one generated dataset on disk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetBundle {
    pub features: PathBuf,
    pub edges: PathBuf,
    pub outfits: Option<PathBuf>,
    pub questions: Option<PathBuf>,
}

/// A generated dataset held in memory.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub config: SyntheticConfig,
    pub prototypes: Matrix,
    pub style_of: Vec<usize>,
    pub features: Matrix,
    pub edges: Vec<(usize, usize)>,
    pub train_outfits: Vec<Vec<usize>>,
    pub test_outfits: Vec<Outfit>,
    pub questions: Vec<FitbQuestion>,
}

impl SyntheticDataset {
    /// Writes `features.txt`, `edges.txt`, `outfits.txt`, `questions.txt`.
    pub fn write_bundle(&self, dir: impl AsRef<Path>) -> Result<DatasetBundle, SyntheticError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let features = dir.join("features.txt");
        let edges = dir.join("edges.txt");
        let outfits = dir.join("outfits.txt");
        let questions = dir.join("questions.txt");
        text::save_features(&self.features, &features)?;
        text::save_edges(&self.edges, &edges)?;
        text::save_outfits(&self.test_outfits, &outfits)?;
        text::save_questions(&self.questions, &questions)?;
        Ok(DatasetBundle {
            features,
            edges,
            outfits: Some(outfits),
            questions: Some(questions),
        })
    }
}

const MAX_ATTEMPTS_PER_RECORD: usize = 200;

struct OutfitSampler<'c> {
    cfg: &'c SyntheticConfig,
}

impl<'c> OutfitSampler<'c> {
    /// One outfit whose styles are pairwise compatible, or `None` when the
    /// incremental style choice dead-ends.
    fn sample_valid(&self, rng: &mut ChaCha20Rng) -> Option<Vec<usize>> {
        let cfg = self.cfg;
        let size = rng.gen_range(cfg.outfit_size_min..=cfg.outfit_size_max);
        let mut items: Vec<usize> = Vec::with_capacity(size);
        let mut styles: Vec<usize> = Vec::with_capacity(size);
        for _ in 0..size {
            let allowed: Vec<usize> = (0..cfg.num_styles)
                .filter(|&t| styles.iter().all(|&s| cfg.compatible(t, s)))
                .filter(|&t| self.style_has_free_item(t, &items))
                .collect();
            if allowed.is_empty() {
                return None;
            }
            let style = allowed[rng.gen_range(0..allowed.len())];
            let item = self.pick_free_item(style, &items, rng)?;
            styles.push(style);
            items.push(item);
        }
        Some(items)
    }

    fn style_has_free_item(&self, style: usize, taken: &[usize]) -> bool {
        let used = taken
            .iter()
            .filter(|&&i| self.cfg.style_of(i) == style)
            .count();
        used < self.cfg.nodes_per_style
    }

    fn pick_free_item(
        &self,
        style: usize,
        taken: &[usize],
        rng: &mut ChaCha20Rng,
    ) -> Option<usize> {
        let base = style * self.cfg.nodes_per_style;
        for _ in 0..MAX_ATTEMPTS_PER_RECORD {
            let cand = base + rng.gen_range(0..self.cfg.nodes_per_style);
            if !taken.contains(&cand) {
                return Some(cand);
            }
        }
        (base..base + self.cfg.nodes_per_style).find(|c| !taken.contains(c))
    }

    /// Styles incompatible with every style in `styles`.
    fn fully_incompatible_styles(&self, styles: &[usize]) -> Vec<usize> {
        (0..self.cfg.num_styles)
            .filter(|&t| styles.iter().all(|&s| !self.cfg.compatible(t, s)))
            .collect()
    }
}

fn canonical(items: &[usize]) -> Vec<usize> {
    let mut v = items.to_vec();
    v.sort_unstable();
    v
}

fn has_incompatible_pair(cfg: &SyntheticConfig, items: &[usize]) -> bool {
    for (a, &i) in items.iter().enumerate() {
        for &j in items.iter().skip(a + 1) {
            if !cfg.compatible(cfg.style_of(i), cfg.style_of(j)) {
                return true;
            }
        }
    }
    false
}

/// Generates a full dataset: features, relation graph, labelled test
/// outfits, and fill-in-the-blank questions. Deterministic per seed.
pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticDataset, SyntheticError> {
    cfg.validate()?;
    let any_compatible = (0..cfg.num_styles)
        .any(|a| (0..cfg.num_styles).any(|b| cfg.compatible(a, b)));
    let needs_outfits = cfg.num_train_outfits + cfg.num_valid_outfits + cfg.num_questions > 0;
    if needs_outfits && !any_compatible {
        return Err(SyntheticError::InfeasibleConfig(
            "no compatible style pair exists".to_string(),
        ));
    }

    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let normal = StandardNormal;
    let num_nodes = cfg.num_nodes();

    let prototypes = Matrix::from_vec(
        cfg.num_styles,
        cfg.feature_dim,
        (0..cfg.num_styles * cfg.feature_dim)
            .map(|_| <StandardNormal as Distribution<f64>>::sample(&normal, &mut rng))
            .collect(),
    );
    let style_of: Vec<usize> = (0..num_nodes).map(|n| cfg.style_of(n)).collect();
    let mut features = Matrix::zeros(num_nodes, cfg.feature_dim);
    for node in 0..num_nodes {
        let proto = prototypes.row(style_of[node]);
        let dst = features.row_mut(node);
        for (d, p) in dst.iter_mut().zip(proto) {
            let noise: f64 = <StandardNormal as Distribution<f64>>::sample(&normal, &mut rng);
            *d = p + cfg.noise_scale * noise;
        }
    }

    let sampler = OutfitSampler { cfg };
    let mut seen: BTreeSet<Vec<usize>> = BTreeSet::new();

    let sample_fresh_valid = |rng: &mut ChaCha20Rng,
                                  seen: &mut BTreeSet<Vec<usize>>,
                                  what: &str|
     -> Result<Vec<usize>, SyntheticError> {
        for _ in 0..MAX_ATTEMPTS_PER_RECORD {
            if let Some(items) = sampler.sample_valid(rng) {
                if seen.insert(canonical(&items)) {
                    return Ok(items);
                }
            }
        }
        Err(SyntheticError::InfeasibleConfig(format!(
            "could not sample a fresh {what} outfit after {MAX_ATTEMPTS_PER_RECORD} attempts"
        )))
    };

    let mut train_outfits = Vec::with_capacity(cfg.num_train_outfits);
    for _ in 0..cfg.num_train_outfits {
        train_outfits.push(sample_fresh_valid(&mut rng, &mut seen, "training")?);
    }

    // The relation graph: every within-outfit pair of the training outfits.
    let mut edge_set: BTreeSet<(usize, usize)> = BTreeSet::new();
    for outfit in &train_outfits {
        for (a, &i) in outfit.iter().enumerate() {
            for &j in outfit.iter().skip(a + 1) {
                edge_set.insert((i.min(j), i.max(j)));
            }
        }
    }
    let edges: Vec<(usize, usize)> = edge_set.into_iter().collect();

    let mut test_outfits = Vec::with_capacity(cfg.num_valid_outfits + cfg.num_invalid_outfits);
    for _ in 0..cfg.num_valid_outfits {
        let items = sample_fresh_valid(&mut rng, &mut seen, "valid test")?;
        test_outfits.push(Outfit { items, valid: true });
    }

    for _ in 0..cfg.num_invalid_outfits {
        let mut made = None;
        for _ in 0..MAX_ATTEMPTS_PER_RECORD {
            let Some(mut items) = sampler.sample_valid(&mut rng) else {
                continue;
            };
            let slot = rng.gen_range(0..items.len());
            let others: Vec<usize> = items
                .iter()
                .enumerate()
                .filter(|&(p, _)| p != slot)
                .map(|(_, &i)| style_of[i])
                .collect();
            let clashing: Vec<usize> = (0..cfg.num_styles)
                .filter(|&t| others.iter().any(|&s| !cfg.compatible(t, s)))
                .collect();
            if clashing.is_empty() {
                continue;
            }
            let style = clashing[rng.gen_range(0..clashing.len())];
            let taken: Vec<usize> = items
                .iter()
                .enumerate()
                .filter(|&(p, _)| p != slot)
                .map(|(_, &i)| i)
                .collect();
            let Some(replacement) = sampler.pick_free_item(style, &taken, &mut rng) else {
                continue;
            };
            items[slot] = replacement;
            if !has_incompatible_pair(cfg, &items) || !seen.insert(canonical(&items)) {
                continue;
            }
            made = Some(items);
            break;
        }
        let items = made.ok_or_else(|| {
            SyntheticError::InfeasibleConfig(
                "could not construct an invalid outfit (no clashing styles reachable)".to_string(),
            )
        })?;
        debug_assert!(has_incompatible_pair(cfg, &items));
        test_outfits.push(Outfit {
            items,
            valid: false,
        });
    }

    let mut questions = Vec::with_capacity(cfg.num_questions);
    for _ in 0..cfg.num_questions {
        let mut made = None;
        for _ in 0..MAX_ATTEMPTS_PER_RECORD {
            let Some(items) = sampler.sample_valid(&mut rng) else {
                continue;
            };
            if seen.contains(&canonical(&items)) {
                continue;
            }
            let answer_slot = rng.gen_range(0..items.len());
            let answer = items[answer_slot];
            let partial: Vec<usize> = items
                .iter()
                .enumerate()
                .filter(|&(p, _)| p != answer_slot)
                .map(|(_, &i)| i)
                .collect();
            let partial_styles: Vec<usize> = partial.iter().map(|&i| style_of[i]).collect();
            let wrong_styles = sampler.fully_incompatible_styles(&partial_styles);
            if wrong_styles.is_empty() {
                return Err(SyntheticError::InfeasibleConfig(
                    "no style is incompatible with a sampled partial outfit".to_string(),
                ));
            }
            let mut choices = vec![answer];
            let mut taken = partial.clone();
            taken.push(answer);
            let mut ok = true;
            for _ in 0..3 {
                let style = wrong_styles[rng.gen_range(0..wrong_styles.len())];
                match sampler.pick_free_item(style, &taken, &mut rng) {
                    Some(item) => {
                        choices.push(item);
                        taken.push(item);
                    }
                    None => {
                        ok = false;
                        break;
                    }
                }
            }
            if !ok {
                continue;
            }
            choices.shuffle(&mut rng);
            let answer_index = choices
                .iter()
                .position(|&c| c == answer)
                .expect("answer stays among the choices");
            seen.insert(canonical(&items));
            made = Some(FitbQuestion {
                partial,
                choices,
                answer_index,
            });
            break;
        }
        questions.push(made.ok_or_else(|| {
            SyntheticError::InfeasibleConfig(
                "could not build a fill-in-the-blank question".to_string(),
            )
        })?);
    }

    Ok(SyntheticDataset {
        config: cfg.clone(),
        prototypes,
        style_of,
        features,
        edges,
        train_outfits,
        test_outfits,
        questions,
    })
}
