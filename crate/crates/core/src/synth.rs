//! Seeded synthetic datasets with planted per-class sub-graph motifs.
//!
//! Every video carries one instance of its class motif: `motif_size`
//! tubelets whose features sit near fixed archetypes and whose box paths
//! follow fixed templates. The remaining tubelets are distractors drawn from
//! a background mixture shared by all classes. All randomness comes from
//! ChaCha8 streams keyed by [`derive_seed`], one stream per video, so output
//! is identical across runs and platforms.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{save_dataset, BBox, Dataset, DatasetMeta, Tubelet, VideoRecord};
use crate::error::{Error, Result};
use crate::seed::derive_seed;

const TAG_POOL: u64 = 1;
const TAG_MOTIF: u64 = 2;
const TAG_TRAIN: u64 = 3;
const TAG_TEST: u64 = 4;
const TAG_THEME: u64 = 5;

const MIN_SIZE: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    #[serde(alias = "L")]
    pub l: usize,
    #[serde(alias = "T")]
    pub t: usize,
    #[serde(alias = "M")]
    pub m: usize,
    #[serde(alias = "D_vis")]
    pub d_vis: usize,
    /// Motif size per class, cycled when shorter than `num_classes`.
    pub motif_sizes: Vec<usize>,
    /// Motif variants per class, cycled. A video uses one variant.
    pub motif_variants: Vec<usize>,
    /// Components of the shared background mixture.
    pub pool_size: usize,
    /// Std of background component centers around the origin.
    pub pool_spread: f64,
    /// Within-component std of background features.
    pub background_sigma: f64,
    /// Std of a class's theme center around the origin.
    pub archetype_scale: f64,
    /// Std of each archetype around its class's theme center.
    pub archetype_spread: f64,
    pub feature_noise_sigma: f64,
    pub coord_noise_sigma: f64,
    /// Share of motifs built as converging paths; the rest move in parallel.
    pub converging_fraction: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            num_classes: 5,
            train_per_class: 100,
            test_per_class: 20,
            l: 4,
            t: 16,
            m: 8,
            d_vis: 64,
            motif_sizes: vec![3, 4, 5],
            motif_variants: vec![1],
            pool_size: 8,
            pool_spread: 6.0,
            background_sigma: 15.0,
            archetype_scale: 30.0,
            archetype_spread: 1.5,
            feature_noise_sigma: 0.3,
            coord_noise_sigma: 0.005,
            converging_fraction: 0.5,
            seed: 7,
        }
    }
}

fn cycled(v: &[usize], i: usize) -> usize {
    v[i % v.len()]
}

impl GeneratorConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: GeneratorConfig = crate::config::load_structured(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("num_classes", self.num_classes),
            ("l", self.l),
            ("t", self.t),
            ("m", self.m),
            ("d_vis", self.d_vis),
            ("pool_size", self.pool_size),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.motif_sizes.is_empty() || self.motif_variants.is_empty() {
            return Err(Error::Config("motif_sizes and motif_variants must be non-empty".into()));
        }
        if let Some(&s) = self.motif_sizes.iter().find(|&&s| !(3..=5).contains(&s)) {
            return Err(Error::Config(format!("motif size {s} outside {{3, 4, 5}}")));
        }
        if let Some(&s) = self.motif_sizes.iter().find(|&&s| s > self.m) {
            return Err(Error::Config(format!("motif size {s} exceeds M = {}", self.m)));
        }
        if self.motif_variants.contains(&0) {
            return Err(Error::Config("motif_variants entries must be >= 1".into()));
        }
        for (name, v) in [
            ("pool_spread", self.pool_spread),
            ("background_sigma", self.background_sigma),
            ("archetype_scale", self.archetype_scale),
            ("archetype_spread", self.archetype_spread),
            ("feature_noise_sigma", self.feature_noise_sigma),
            ("coord_noise_sigma", self.coord_noise_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.converging_fraction) {
            return Err(Error::Config("converging_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn motif_size(&self, class: usize) -> usize {
        cycled(&self.motif_sizes, class)
    }

    pub fn variants(&self, class: usize) -> usize {
        cycled(&self.motif_variants, class)
    }

    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta::new(self.num_classes, self.l, self.t, self.m, self.d_vis)
    }
}

/// One planted pattern: feature archetypes and box-path templates per node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotifSpec {
    pub class_id: usize,
    pub variant: usize,
    pub motif_size: usize,
    pub archetypes: Vec<Vec<f64>>,
    pub trajectories: Vec<Vec<BBox>>,
    pub converging: bool,
    pub feature_noise_sigma: f64,
    pub coord_noise_sigma: f64,
}

impl MotifSpec {
    /// Fails unless every archetype pair is farther apart than four noise
    /// standard deviations.
    pub fn check_separable(&self) -> Result<()> {
        let limit = 4.0 * self.feature_noise_sigma;
        for i in 0..self.archetypes.len() {
            for j in i + 1..self.archetypes.len() {
                let d = dist(&self.archetypes[i], &self.archetypes[j]);
                if d <= limit {
                    return Err(Error::InvalidArgument(format!(
                        "class {} variant {}: archetypes {i} and {j} are {d:.4} apart, need > {limit:.4}",
                        self.class_id, self.variant
                    )));
                }
            }
        }
        Ok(())
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Where one video's motif landed, as post-sort `(clip, slot)` positions in
/// motif node order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MotifTruth {
    pub video_id: String,
    pub label: usize,
    pub variant: usize,
    pub positions: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub train: Dataset,
    pub test: Dataset,
    pub truth: Vec<MotifTruth>,
    pub motifs: Vec<MotifSpec>,
}

impl Generated {
    pub fn truth_for(&self, video_id: &str) -> Option<&MotifTruth> {
        self.truth.iter().find(|t| t.video_id == video_id)
    }

    /// Writes `train.jsonl`, `test.jsonl` and `truth.jsonl` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_dataset(&self.train, dir.join("train.jsonl"))?;
        save_dataset(&self.test, dir.join("test.jsonl"))?;
        save_truth(&self.truth, dir.join("truth.jsonl"))
    }
}

pub fn save_truth(truth: &[MotifTruth], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for t in truth {
        let line = serde_json::to_string(t).expect("truth serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_truth(path: impl AsRef<Path>) -> Result<Vec<MotifTruth>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn gaussian_vec(rng: &mut ChaCha8Rng, center: &[f64], sigma: f64) -> Vec<f64> {
    center.iter().map(|&c| c + sigma * normal(rng)).collect()
}

/// Box path through a start point, a knot and an end point, linear between.
fn piecewise_path(t: usize, start: [f64; 2], knot: [f64; 2], end: [f64; 2], knot_at: usize, size: [f64; 2]) -> Vec<BBox> {
    (0..t)
        .map(|f| {
            let (a, b, u) = if f <= knot_at {
                (start, knot, f as f64 / knot_at.max(1) as f64)
            } else {
                (knot, end, (f - knot_at) as f64 / (t - 1 - knot_at).max(1) as f64)
            };
            BBox::new(
                a[0] + u * (b[0] - a[0]),
                a[1] + u * (b[1] - a[1]),
                size[0],
                size[1],
            )
        })
        .collect()
}

fn point(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 2] {
    [rng.random_range(lo..hi), rng.random_range(lo..hi)]
}

fn size(rng: &mut ChaCha8Rng) -> [f64; 2] {
    [rng.random_range(0.05..0.3), rng.random_range(0.05..0.3)]
}

fn knot_frame(rng: &mut ChaCha8Rng, t: usize) -> usize {
    if t <= 2 {
        0
    } else {
        rng.random_range(1..t - 1)
    }
}

fn random_path(rng: &mut ChaCha8Rng, t: usize) -> Vec<BBox> {
    let (s, k, e) = (point(rng, 0.05, 0.95), point(rng, 0.05, 0.95), point(rng, 0.05, 0.95));
    let at = knot_frame(rng, t);
    piecewise_path(t, s, k, e, at, size(rng))
}

fn motif_spec(cfg: &GeneratorConfig, class: usize, variant: usize) -> Result<MotifSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, TAG_MOTIF, class as u64, variant as u64]));
    let n = cfg.motif_size(class);
    let mut theme_rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, TAG_THEME, class as u64]));
    let theme = gaussian_vec(&mut theme_rng, &vec![0.0; cfg.d_vis], cfg.archetype_scale);
    let archetypes: Vec<Vec<f64>> = (0..n).map(|_| gaussian_vec(&mut rng, &theme, cfg.archetype_spread)).collect();
    let converging = rng.random::<f64>() < cfg.converging_fraction;
    let at = knot_frame(&mut rng, cfg.t);
    let trajectories = if converging {
        let meet = point(&mut rng, 0.35, 0.65);
        (0..n)
            .map(|_| {
                let start = point(&mut rng, 0.05, 0.95);
                let knot = [(start[0] + meet[0]) / 2.0, (start[1] + meet[1]) / 2.0];
                let end = [meet[0] + 0.02 * normal(&mut rng), meet[1] + 0.02 * normal(&mut rng)];
                piecewise_path(cfg.t, start, knot, end, at, size(&mut rng))
            })
            .collect()
    } else {
        let shift = [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)];
        let bend = [rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)];
        (0..n)
            .map(|_| {
                let start = point(&mut rng, 0.35, 0.65);
                let knot = [start[0] + shift[0] / 2.0 + bend[0], start[1] + shift[1] / 2.0 + bend[1]];
                let end = [start[0] + shift[0], start[1] + shift[1]];
                piecewise_path(cfg.t, start, knot, end, at, size(&mut rng))
            })
            .collect()
    };
    let spec = MotifSpec {
        class_id: class,
        variant,
        motif_size: n,
        archetypes,
        trajectories,
        converging,
        feature_noise_sigma: cfg.feature_noise_sigma,
        coord_noise_sigma: cfg.coord_noise_sigma,
    };
    spec.check_separable()?;
    Ok(spec)
}

fn clamp_box(b: BBox) -> BBox {
    BBox::new(
        b.cx.clamp(0.0, 1.0),
        b.cy.clamp(0.0, 1.0),
        b.w.max(MIN_SIZE).min(1.0),
        b.h.max(MIN_SIZE).min(1.0),
    )
}

fn jitter_path(rng: &mut ChaCha8Rng, path: &[BBox], sigma: f64) -> Vec<BBox> {
    path.iter()
        .map(|b| {
            clamp_box(BBox::new(
                b.cx + sigma * normal(rng),
                b.cy + sigma * normal(rng),
                b.w + sigma * normal(rng),
                b.h + sigma * normal(rng),
            ))
        })
        .collect()
}

struct Background {
    centers: Vec<Vec<f64>>,
}

impl Background {
    fn new(cfg: &GeneratorConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, TAG_POOL]));
        let origin = vec![0.0; cfg.d_vis];
        Background {
            centers: (0..cfg.pool_size).map(|_| gaussian_vec(&mut rng, &origin, cfg.pool_spread)).collect(),
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng, sigma: f64) -> Vec<f64> {
        let c = rng.random_range(0..self.centers.len());
        gaussian_vec(rng, &self.centers[c], sigma)
    }
}

fn video(
    cfg: &GeneratorConfig,
    bg: &Background,
    motifs: &[Vec<MotifSpec>],
    video_id: String,
    label: usize,
    seed: u64,
) -> (VideoRecord, MotifTruth) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let variant = rng.random_range(0..motifs[label].len());
    let motif = &motifs[label][variant];
    // the whole motif co-occurs in one clip
    let clip_at = rng.random_range(0..cfg.l);
    let mut slots: Vec<usize> = (0..cfg.m).collect();
    slots.shuffle(&mut rng);
    let planted: Vec<(usize, usize)> = slots[..motif.motif_size].iter().map(|&s| (clip_at, s)).collect();

    // (tubelet, motif node or usize::MAX) per clip before the score sort
    let mut clips: Vec<Vec<(Tubelet, usize)>> = vec![Vec::with_capacity(cfg.m); cfg.l];
    for clip in 0..cfg.l {
        for slot in 0..cfg.m {
            let node = planted.iter().position(|&p| p == (clip, slot));
            let score = rng.random::<f64>();
            let (boxes, visual) = match node {
                Some(k) => (
                    jitter_path(&mut rng, &motif.trajectories[k], cfg.coord_noise_sigma),
                    gaussian_vec(&mut rng, &motif.archetypes[k], cfg.feature_noise_sigma),
                ),
                None => {
                    let path = random_path(&mut rng, cfg.t);
                    let path = jitter_path(&mut rng, &path, cfg.coord_noise_sigma);
                    (path, bg.sample(&mut rng, cfg.background_sigma))
                }
            };
            let tub = Tubelet {
                clip_index: clip,
                boxes,
                visual,
                score,
            };
            clips[clip].push((tub, node.unwrap_or(usize::MAX)));
        }
    }
    let mut positions = vec![(0, 0); motif.motif_size];
    let clips = clips
        .into_iter()
        .enumerate()
        .map(|(c, mut tubs)| {
            tubs.sort_by(|a, b| b.0.score.total_cmp(&a.0.score));
            for (slot, (_, node)) in tubs.iter().enumerate() {
                if *node != usize::MAX {
                    positions[*node] = (c, slot);
                }
            }
            tubs.into_iter().map(|(t, _)| t).collect()
        })
        .collect();
    let truth = MotifTruth {
        video_id: video_id.clone(),
        label,
        variant,
        positions,
    };
    (
        VideoRecord {
            video_id,
            label,
            clips,
        },
        truth,
    )
}

fn split(
    cfg: &GeneratorConfig,
    bg: &Background,
    motifs: &[Vec<MotifSpec>],
    name: &str,
    tag: u64,
    per_class: usize,
) -> (Dataset, Vec<MotifTruth>) {
    let mut records = Vec::with_capacity(per_class * cfg.num_classes);
    let mut truth = Vec::with_capacity(records.capacity());
    // interleave classes so file order carries no label runs
    for i in 0..per_class {
        for c in 0..cfg.num_classes {
            let index = (i * cfg.num_classes + c) as u64;
            let id = format!("{name}-{index:05}");
            let (r, t) = video(cfg, bg, motifs, id, c, derive_seed(&[cfg.seed, tag, index]));
            records.push(r);
            truth.push(t);
        }
    }
    (
        Dataset {
            meta: cfg.meta(),
            records,
        },
        truth,
    )
}

pub fn generate(cfg: &GeneratorConfig) -> Result<Generated> {
    cfg.validate()?;
    let per_class: Vec<Vec<MotifSpec>> = (0..cfg.num_classes)
        .map(|c| (0..cfg.variants(c)).map(|v| motif_spec(cfg, c, v)).collect())
        .collect::<Result<_>>()?;
    let bg = Background::new(cfg);
    let (train, mut truth) = split(cfg, &bg, &per_class, "train", TAG_TRAIN, cfg.train_per_class);
    let (test, test_truth) = split(cfg, &bg, &per_class, "test", TAG_TEST, cfg.test_per_class);
    truth.extend(test_truth);
    Ok(Generated {
        train,
        test,
        truth,
        motifs: per_class.into_iter().flatten().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::validate;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            train_per_class: 4,
            test_per_class: 2,
            ..Default::default()
        }
    }

    #[test]
    fn counts_follow_config() {
        let cfg = GeneratorConfig {
            train_per_class: 100,
            test_per_class: 20,
            seed: 7,
            ..Default::default()
        };
        let g = generate(&cfg).unwrap();
        assert_eq!(g.train.records.len(), 500);
        assert_eq!(g.test.records.len(), 100);
        assert_eq!(g.truth.len(), 600);
        assert!(validate(&g.train).is_valid());
        assert!(validate(&g.test).is_valid());
        for t in &g.truth {
            assert_eq!(t.positions.len(), cfg.motif_size(t.label));
        }
    }

    #[test]
    fn zero_noise_reproduces_archetypes() {
        let cfg = GeneratorConfig {
            feature_noise_sigma: 0.0,
            ..small()
        };
        let g = generate(&cfg).unwrap();
        for (r, t) in g.train.records.iter().zip(&g.truth) {
            let spec = g
                .motifs
                .iter()
                .find(|m| m.class_id == t.label && m.variant == t.variant)
                .unwrap();
            for (k, &(c, s)) in t.positions.iter().enumerate() {
                assert_eq!(r.clips[c][s].visual, spec.archetypes[k]);
            }
        }
    }

    #[test]
    fn positions_are_distinct_and_scores_sorted() {
        let g = generate(&small()).unwrap();
        for (r, t) in g.train.records.iter().zip(&g.truth) {
            let mut p = t.positions.clone();
            p.sort_unstable();
            p.dedup();
            assert_eq!(p.len(), t.positions.len());
            for clip in &r.clips {
                assert!(clip.windows(2).all(|w| w[0].score >= w[1].score));
            }
        }
    }

    #[test]
    fn seeds_are_deterministic_and_distinct() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate(&GeneratorConfig { seed: 8, ..small() }).unwrap();
        assert_ne!(a.train.records[0].clips[0][0].visual, c.train.records[0].clips[0][0].visual);
    }

    #[test]
    fn files_are_byte_identical_across_runs() {
        let dir = tempfile::tempdir().unwrap();
        let g = generate(&small()).unwrap();
        g.write(dir.path().join("a")).unwrap();
        generate(&small()).unwrap().write(dir.path().join("b")).unwrap();
        for f in ["train.jsonl", "test.jsonl", "truth.jsonl"] {
            let x = std::fs::read(dir.path().join("a").join(f)).unwrap();
            let y = std::fs::read(dir.path().join("b").join(f)).unwrap();
            assert_eq!(x, y, "{f}");
        }
        let truth = load_truth(dir.path().join("a/truth.jsonl")).unwrap();
        assert_eq!(truth, g.truth);
    }

    #[test]
    fn motif_larger_than_clip_is_rejected() {
        let cfg = GeneratorConfig {
            m: 4,
            motif_sizes: vec![5],
            ..small()
        };
        assert!(generate(&cfg).is_err());
    }

    #[test]
    fn inseparable_archetypes_are_rejected() {
        let cfg = GeneratorConfig {
            archetype_scale: 0.01,
            archetype_spread: 0.01,
            feature_noise_sigma: 1.0,
            ..small()
        };
        assert!(matches!(generate(&cfg), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn variants_are_used() {
        let cfg = GeneratorConfig {
            motif_variants: vec![2],
            train_per_class: 20,
            ..small()
        };
        let g = generate(&cfg).unwrap();
        assert_eq!(g.motifs.len(), 10);
        let used: std::collections::BTreeSet<usize> =
            g.truth.iter().filter(|t| t.label == 0).map(|t| t.variant).collect();
        assert_eq!(used.len(), 2);
    }

    #[test]
    fn converging_motifs_end_close_together() {
        let cfg = GeneratorConfig {
            converging_fraction: 1.0,
            ..small()
        };
        let g = generate(&cfg).unwrap();
        for m in &g.motifs {
            assert!(m.converging);
            let first: Vec<&BBox> = m.trajectories.iter().map(|p| &p[0]).collect();
            let last: Vec<&BBox> = m.trajectories.iter().map(|p| p.last().unwrap()).collect();
            let spread = |bs: &[&BBox]| {
                let mut s: f64 = 0.0;
                for a in bs {
                    for b in bs {
                        s = s.max((a.cx - b.cx).hypot(a.cy - b.cy));
                    }
                }
                s
            };
            assert!(spread(&last) < 0.2);
            assert!(spread(&last) < spread(&first) + 1e-9);
        }
    }
}
