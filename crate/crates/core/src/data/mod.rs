//! TextShapes: deterministic synthetic scenes of non-overlapping
//! geometric shapes with templated spatial-language descriptions of one
//! target shape. Scenes are derived purely from a seed, rasterized with
//! hard edges so masks and surface metrics are exact, and described at
//! three levels: no text, the bare shape name, or a quadrant-plus-relation
//! clause that uniquely identifies the target even when another shape of
//! the same kind is present ("ambiguous" scenes).

pub mod dataset;
pub mod pgm;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoders::{Vocabulary, EOS, SOS, UNK};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Disk, ShapeKind::Square, ShapeKind::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Disk => "disk",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }
}

/// One shape: integer center and size so rasterization is exact.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub cx: i64,
    pub cy: i64,
    /// Disk radius, square half-side, or triangle half-height.
    pub size: i64,
    pub intensity: f64,
}

impl ShapeSpec {
    pub fn covers(&self, x: i64, y: i64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        match self.kind {
            ShapeKind::Disk => dx * dx + dy * dy <= self.size * self.size,
            ShapeKind::Square => dx.abs() <= self.size && dy.abs() <= self.size,
            // upward-pointing isoceles: apex (cx, cy-s), base at cy+s
            ShapeKind::Triangle => {
                dy >= -self.size && dy <= self.size && 2 * dx.abs() <= dy + self.size
            }
        }
    }

    /// Radius of the smallest circle around the center covering the shape.
    pub fn bounding_radius(&self) -> f64 {
        match self.kind {
            ShapeKind::Disk => self.size as f64,
            ShapeKind::Square | ShapeKind::Triangle => self.size as f64 * std::f64::consts::SQRT_2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub canvas: usize,
    pub shapes: Vec<ShapeSpec>,
    pub target: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DescriptionLevel {
    None,
    Simple,
    Complex,
}

impl DescriptionLevel {
    pub const ALL: [DescriptionLevel; 3] = [
        DescriptionLevel::None,
        DescriptionLevel::Simple,
        DescriptionLevel::Complex,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DescriptionLevel::None => "none",
            DescriptionLevel::Simple => "simple",
            DescriptionLevel::Complex => "complex",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(DescriptionLevel::None),
            "simple" => Ok(DescriptionLevel::Simple),
            "complex" => Ok(DescriptionLevel::Complex),
            other => Err(Error::Config(format!(
                "unknown description level '{}' (none|simple|complex)",
                other
            ))),
        }
    }
}

/// Scene-generation knobs (the `[data]` section of the run config).
#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub canvas: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Guarantee a second shape of the target's kind, placed in a
    /// different quadrant, so bare-name descriptions cannot identify the
    /// target but quadrant descriptions can.
    pub ambiguous: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            canvas: 64,
            min_shapes: 2,
            max_shapes: 4,
            ambiguous: false,
        }
    }
}

const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

pub fn generate_scene(seed: u64, cfg: &GenConfig) -> Result<SceneSpec> {
    if cfg.canvas < 32 {
        return Err(Error::Config(format!(
            "canvas {} below minimum 32",
            cfg.canvas
        )));
    }
    if cfg.min_shapes < 2 || cfg.max_shapes > 4 || cfg.min_shapes > cfg.max_shapes {
        return Err(Error::Config(format!(
            "shape count range {}..={} outside supported 2..=4",
            cfg.min_shapes, cfg.max_shapes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_shapes = rng.gen_range(cfg.min_shapes..=cfg.max_shapes);
    let target_kind = ShapeKind::ALL[rng.gen_range(0..3)];
    let other_kinds: Vec<ShapeKind> = ShapeKind::ALL
        .iter()
        .copied()
        .filter(|k| *k != target_kind)
        .collect();

    let mut kinds = Vec::with_capacity(n_shapes);
    if cfg.ambiguous {
        kinds.push(target_kind);
        kinds.push(target_kind);
        for _ in 2..n_shapes {
            kinds.push(other_kinds[rng.gen_range(0..other_kinds.len())]);
        }
    } else {
        kinds.push(target_kind);
        for _ in 1..n_shapes {
            kinds.push(other_kinds[rng.gen_range(0..other_kinds.len())]);
        }
    }

    let c = cfg.canvas as i64;
    let size_lo = (c * 5 / 64).max(3);
    let size_hi = (c * 9 / 64).max(size_lo + 1);
    let mut shapes: Vec<ShapeSpec> = Vec::with_capacity(n_shapes);
    let mut attempts = 0usize;
    for (i, &kind) in kinds.iter().enumerate() {
        loop {
            attempts += 1;
            if attempts > MAX_PLACEMENT_ATTEMPTS {
                return Err(Error::Generation {
                    seed,
                    attempts: MAX_PLACEMENT_ATTEMPTS,
                });
            }
            let size = rng.gen_range(size_lo..=size_hi);
            let candidate = ShapeSpec {
                kind,
                cx: 0,
                cy: 0,
                size,
                intensity: 0.0,
            };
            let margin = candidate.bounding_radius().ceil() as i64 + 1;
            if 2 * margin >= c {
                continue;
            }
            let cx = rng.gen_range(margin..c - margin);
            let cy = rng.gen_range(margin..c - margin);
            let candidate = ShapeSpec {
                cx,
                cy,
                intensity: rng.gen_range(0.35..=1.0),
                ..candidate
            };
            let clear = shapes.iter().all(|s| {
                let (dx, dy) = ((s.cx - cx) as f64, (s.cy - cy) as f64);
                (dx * dx + dy * dy).sqrt() > s.bounding_radius() + candidate.bounding_radius() + 2.0
            });
            // the duplicated-kind pair must straddle quadrants so a
            // quadrant clause can always tell them apart
            let quadrant_ok = !(cfg.ambiguous && i == 1)
                || quadrant(&candidate, cfg.canvas) != quadrant(&shapes[0], cfg.canvas);
            if clear && quadrant_ok {
                shapes.push(candidate);
                break;
            }
        }
    }

    let target = if cfg.ambiguous { rng.gen_range(0..2) } else { 0 };
    Ok(SceneSpec {
        canvas: cfg.canvas,
        shapes,
        target,
    })
}

// ── Rasterization ───────────────────────────────────────────────────

/// Hard-edged render: background 0, shapes at their intensities; the
/// ground-truth mask covers the target shape only; bbox is the tight
/// half-open pixel hull normalized by the canvas size.
pub fn render(spec: &SceneSpec) -> (Vec<f64>, Vec<u8>, [f64; 4]) {
    let n = spec.canvas;
    let mut image = vec![0.0; n * n];
    let mut mask = vec![0u8; n * n];
    for (i, shape) in spec.shapes.iter().enumerate() {
        for y in 0..n as i64 {
            for x in 0..n as i64 {
                if shape.covers(x, y) {
                    image[y as usize * n + x as usize] = shape.intensity;
                    if i == spec.target {
                        mask[y as usize * n + x as usize] = 1;
                    }
                }
            }
        }
    }
    let bbox = tight_bbox(&mask, n, n).expect("target shape renders at least one pixel");
    (image, mask, bbox)
}

/// Tight normalized half-open bbox of a nonempty mask.
pub fn tight_bbox(mask: &[u8], width: usize, height: usize) -> Option<[f64; 4]> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
    let mut any = false;
    for y in 0..height {
        for x in 0..width {
            if mask[y * width + x] == 1 {
                any = true;
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    any.then(|| {
        [
            x0 as f64 / width as f64,
            y0 as f64 / height as f64,
            (x1 + 1) as f64 / width as f64,
            (y1 + 1) as f64 / height as f64,
        ]
    })
}

// ── Description grammar ─────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quadrant {
    UpperLeft,
    UpperRight,
    LowerLeft,
    LowerRight,
}

impl Quadrant {
    pub fn word(self) -> &'static str {
        match self {
            Quadrant::UpperLeft => "upper-left",
            Quadrant::UpperRight => "upper-right",
            Quadrant::LowerLeft => "lower-left",
            Quadrant::LowerRight => "lower-right",
        }
    }
}

pub fn quadrant(shape: &ShapeSpec, canvas: usize) -> Quadrant {
    let half = canvas as i64 / 2;
    match (shape.cx < half, shape.cy < half) {
        (true, true) => Quadrant::UpperLeft,
        (false, true) => Quadrant::UpperRight,
        (true, false) => Quadrant::LowerLeft,
        (false, false) => Quadrant::LowerRight,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Left,
    Right,
    Above,
    Below,
}

impl Relation {
    pub fn word(self) -> &'static str {
        match self {
            Relation::Left => "left",
            Relation::Right => "right",
            Relation::Above => "above",
            Relation::Below => "below",
        }
    }
}

/// Dominant-axis relation of `a` relative to `b`.
pub fn relation(a: &ShapeSpec, b: &ShapeSpec) -> Relation {
    let (dx, dy) = (a.cx - b.cx, a.cy - b.cy);
    if dx.abs() >= dy.abs() {
        if dx < 0 {
            Relation::Left
        } else {
            Relation::Right
        }
    } else if dy < 0 {
        Relation::Above
    } else {
        Relation::Below
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Description {
    pub text: String,
    pub tokens: Vec<usize>,
    /// Complex level could not single out the target and fell back to a
    /// quadrant-only clause.
    pub ambiguous_fallback: bool,
}

/// Deterministic templated description of the scene's target shape.
pub fn describe(spec: &SceneSpec, level: DescriptionLevel, vocab: &Vocabulary) -> Description {
    let target = &spec.shapes[spec.target];
    let (text, fallback) = match level {
        DescriptionLevel::None => (String::new(), false),
        DescriptionLevel::Simple => (target.kind.word().to_string(), false),
        DescriptionLevel::Complex => complex_text(spec),
    };
    let tokens = vocab.wrap(&vocab.encode_body(&text));
    debug_assert!(
        !tokens.contains(&UNK),
        "grammar word missing from vocabulary in '{}'",
        text
    );
    Description {
        text,
        tokens,
        ambiguous_fallback: fallback,
    }
}

fn complex_text(spec: &SceneSpec) -> (String, bool) {
    let target = &spec.shapes[spec.target];
    let q = quadrant(target, spec.canvas);
    for (o_idx, other) in spec.shapes.iter().enumerate() {
        if o_idx == spec.target {
            continue;
        }
        let rel = relation(target, other);
        if description_is_unique(spec, target.kind, q, rel, other.kind) {
            return (
                format!(
                    "the {} in the {} quadrant {} of the {}",
                    target.kind.word(),
                    q.word(),
                    rel.word(),
                    other.kind.word()
                ),
                false,
            );
        }
    }
    (
        format!("the {} in the {} quadrant", target.kind.word(), q.word()),
        true,
    )
}

/// A description matches shape `s` when kind and quadrant agree and some
/// other shape of the referenced kind stands in the stated relation.
/// Unique means exactly the target matches.
fn description_is_unique(
    spec: &SceneSpec,
    kind: ShapeKind,
    q: Quadrant,
    rel: Relation,
    other_kind: ShapeKind,
) -> bool {
    let matches = |s_idx: usize| {
        let s = &spec.shapes[s_idx];
        s.kind == kind
            && quadrant(s, spec.canvas) == q
            && spec
                .shapes
                .iter()
                .enumerate()
                .any(|(o_idx, o)| o_idx != s_idx && o.kind == other_kind && relation(s, o) == rel)
    };
    (0..spec.shapes.len()).filter(|&i| matches(i)).count() == 1 && matches(spec.target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{EOS as T_EOS, SOS as T_SOS};

    fn vocab() -> Vocabulary {
        Vocabulary::builtin()
    }

    #[test]
    fn same_seed_gives_identical_scene() {
        let cfg = GenConfig::default();
        let a = generate_scene(1234, &cfg).unwrap();
        let b = generate_scene(1234, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_count_respects_config() {
        let cfg = GenConfig {
            min_shapes: 3,
            max_shapes: 4,
            ..GenConfig::default()
        };
        for seed in 0..50 {
            let s = generate_scene(seed, &cfg).unwrap();
            assert!(s.shapes.len() >= 3 && s.shapes.len() <= 4);
        }
    }

    #[test]
    fn canvas_below_32_rejected() {
        let cfg = GenConfig {
            canvas: 16,
            ..GenConfig::default()
        };
        assert!(generate_scene(0, &cfg).is_err());
    }

    #[test]
    fn thousand_seeds_no_overlap_no_out_of_bounds() {
        // pixel-level oracle: rasterize each shape separately
        for ambiguous in [false, true] {
            let cfg = GenConfig {
                ambiguous,
                ..GenConfig::default()
            };
            for seed in 0..500u64 {
                let s = generate_scene(seed, &cfg).unwrap();
                let n = s.canvas as i64;
                let mut owner = vec![usize::MAX; (n * n) as usize];
                for (i, shape) in s.shapes.iter().enumerate() {
                    for y in 0..n {
                        for x in 0..n {
                            if shape.covers(x, y) {
                                let idx = (y * n + x) as usize;
                                assert_eq!(
                                    owner[idx],
                                    usize::MAX,
                                    "seed {}: shapes {} and {} overlap",
                                    seed,
                                    owner[idx],
                                    i
                                );
                                owner[idx] = i;
                            }
                        }
                    }
                    // fully inside: no coverage on the border ring
                    for t in 0..n {
                        for (x, y) in [(t, 0), (t, n - 1), (0, t), (n - 1, t)] {
                            assert!(!shape.covers(x, y), "seed {}: touches border", seed);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn ambiguous_scenes_duplicate_the_target_kind_across_quadrants() {
        let cfg = GenConfig {
            ambiguous: true,
            ..GenConfig::default()
        };
        for seed in 0..200u64 {
            let s = generate_scene(seed, &cfg).unwrap();
            let tk = s.shapes[s.target].kind;
            let dup = s
                .shapes
                .iter()
                .enumerate()
                .filter(|(i, sh)| *i != s.target && sh.kind == tk)
                .count();
            assert!(dup >= 1, "seed {}: no duplicate of target kind", seed);
            assert_ne!(
                quadrant(&s.shapes[0], s.canvas),
                quadrant(&s.shapes[1], s.canvas)
            );
        }
    }

    #[test]
    fn disk_pixel_count_close_to_area() {
        let spec = SceneSpec {
            canvas: 64,
            shapes: vec![ShapeSpec {
                kind: ShapeKind::Disk,
                cx: 32,
                cy: 32,
                size: 8,
                intensity: 1.0,
            }],
            target: 0,
        };
        let (_, mask, _) = render(&spec);
        let count = mask.iter().filter(|&&b| b == 1).count() as f64;
        let area = std::f64::consts::PI * 64.0;
        assert!(
            (count - area).abs() <= 4.0 * 8.0,
            "count {} vs area {}",
            count,
            area
        );
    }

    #[test]
    fn render_basics() {
        let spec = SceneSpec {
            canvas: 64,
            shapes: vec![
                ShapeSpec {
                    kind: ShapeKind::Square,
                    cx: 20,
                    cy: 20,
                    size: 5,
                    intensity: 1.0,
                },
                ShapeSpec {
                    kind: ShapeKind::Disk,
                    cx: 45,
                    cy: 45,
                    size: 6,
                    intensity: 0.5,
                },
            ],
            target: 0,
        };
        let (img, mask, bbox) = render(&spec);
        assert_eq!(img.iter().cloned().fold(0.0, f64::max), 1.0);
        // square occupies [15, 25] in both axes; half-open normalized hull
        assert_eq!(bbox, [15.0 / 64.0, 15.0 / 64.0, 26.0 / 64.0, 26.0 / 64.0]);
        assert_eq!(mask.iter().filter(|&&b| b == 1).count(), 11 * 11);
    }

    #[test]
    fn bbox_is_the_tight_hull() {
        let cfg = GenConfig::default();
        for seed in 0..50u64 {
            let s = generate_scene(seed, &cfg).unwrap();
            let (_, mask, bbox) = render(&s);
            let n = s.canvas;
            let x0 = (bbox[0] * n as f64).round() as usize;
            let y0 = (bbox[1] * n as f64).round() as usize;
            let x1 = (bbox[2] * n as f64).round() as usize;
            let y1 = (bbox[3] * n as f64).round() as usize;
            // a mask pixel on each extreme row/column of the hull
            assert!((x0..x1).any(|x| mask[y0 * n + x] == 1));
            assert!((x0..x1).any(|x| mask[(y1 - 1) * n + x] == 1));
            assert!((y0..y1).any(|y| mask[y * n + x0] == 1));
            assert!((y0..y1).any(|y| mask[y * n + x1 - 1] == 1));
        }
    }

    #[test]
    fn describe_none_is_sos_eos_only() {
        let cfg = GenConfig::default();
        let s = generate_scene(7, &cfg).unwrap();
        let d = describe(&s, DescriptionLevel::None, &vocab());
        assert_eq!(d.tokens, vec![T_SOS, T_EOS]);
        assert_eq!(d.text, "");
    }

    #[test]
    fn describe_simple_is_kind_word_only() {
        let cfg = GenConfig {
            ambiguous: true,
            ..GenConfig::default()
        };
        let v = vocab();
        for seed in 0..20 {
            let s = generate_scene(seed, &cfg).unwrap();
            let d = describe(&s, DescriptionLevel::Simple, &v);
            assert_eq!(d.tokens.len(), 3, "SOS kind EOS");
            assert_eq!(d.text, s.shapes[s.target].kind.word());
        }
    }

    #[test]
    fn describe_complex_golden_case() {
        // disk upper-left, square lower-right
        let spec = SceneSpec {
            canvas: 64,
            shapes: vec![
                ShapeSpec {
                    kind: ShapeKind::Disk,
                    cx: 14,
                    cy: 14,
                    size: 6,
                    intensity: 0.9,
                },
                ShapeSpec {
                    kind: ShapeKind::Square,
                    cx: 49,
                    cy: 47,
                    size: 6,
                    intensity: 0.6,
                },
            ],
            target: 0,
        };
        let v = vocab();
        let d = describe(&spec, DescriptionLevel::Complex, &v);
        assert_eq!(
            d.text,
            "the disk in the upper-left quadrant left of the square"
        );
        assert!(!d.ambiguous_fallback);
        let words: Vec<usize> = v.encode_body(&d.text);
        assert_eq!(d.tokens[0], T_SOS);
        assert_eq!(*d.tokens.last().unwrap(), T_EOS);
        assert_eq!(&d.tokens[1..d.tokens.len() - 1], &words[..]);
    }

    #[test]
    fn complex_uniquely_identifies_target_in_ambiguous_scenes() {
        let cfg = GenConfig {
            ambiguous: true,
            ..GenConfig::default()
        };
        let v = vocab();
        for seed in 0..300u64 {
            let s = generate_scene(seed, &cfg).unwrap();
            let d = describe(&s, DescriptionLevel::Complex, &v);
            assert!(
                !d.ambiguous_fallback,
                "seed {}: quadrant-separated duplicates must be describable",
                seed
            );
            assert!(d.text.contains(s.shapes[s.target].kind.word()));
            assert!(
                d.text
                    .contains(quadrant(&s.shapes[s.target], s.canvas).word()),
                "seed {}",
                seed
            );
        }
    }

    #[test]
    fn description_tokens_fit_default_max_len() {
        let v = vocab();
        for ambiguous in [false, true] {
            let cfg = GenConfig {
                ambiguous,
                ..GenConfig::default()
            };
            for seed in 0..100 {
                let s = generate_scene(seed, &cfg).unwrap();
                for level in DescriptionLevel::ALL {
                    let d = describe(&s, level, &v);
                    assert!(d.tokens.len() <= 16, "tokens {:?}", d.tokens.len());
                    assert!(!d.tokens.contains(&UNK));
                }
            }
        }
    }
}
