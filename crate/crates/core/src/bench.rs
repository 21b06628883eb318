//! Benchmark manifests, prompt differencing, masks and synthetic scenes.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::evalmetrics::GroundTruthMask;
use crate::mmdit::Grid;
use crate::tensorfile::{write_atomic, Tensor};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EditType {
    ChangeObject,
    AddObject,
    DeleteObject,
    ChangeContent,
    ChangePose,
    ChangeColor,
    ChangeMaterials,
    ChangeBackground,
    ChangeStyle,
    ChangeText,
}

impl EditType {
    pub const ALL: [EditType; 10] = [
        EditType::ChangeObject,
        EditType::AddObject,
        EditType::DeleteObject,
        EditType::ChangeContent,
        EditType::ChangePose,
        EditType::ChangeColor,
        EditType::ChangeMaterials,
        EditType::ChangeBackground,
        EditType::ChangeStyle,
        EditType::ChangeText,
    ];

    pub fn parse(s: &str) -> Option<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string())).ok()
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            EditType::ChangeObject => "change-object",
            EditType::AddObject => "add-object",
            EditType::DeleteObject => "delete-object",
            EditType::ChangeContent => "change-content",
            EditType::ChangePose => "change-pose",
            EditType::ChangeColor => "change-color",
            EditType::ChangeMaterials => "change-materials",
            EditType::ChangeBackground => "change-background",
            EditType::ChangeStyle => "change-style",
            EditType::ChangeText => "change-text",
        }
    }

    /// Categories whose items may legitimately lack an editing mask.
    pub fn mask_optional(&self) -> bool {
        matches!(self, EditType::ChangeStyle | EditType::DeleteObject)
    }
}

/// Where the source latent comes from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ImageRef {
    /// `seed:<n>`: a procedurally generated scene.
    Synthetic(u64),
    /// A rank-3 `h × w × c` tensor file.
    Latent(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlendSpan {
    pub source: Vec<String>,
    pub target: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkItem {
    pub id: String,
    pub image: ImageRef,
    pub source_prompt: Vec<String>,
    pub target_prompt: Vec<String>,
    /// Hand-annotated blend words; overrides the computed prompt diff.
    pub blend: Option<BlendSpan>,
    pub mask: Option<PathBuf>,
    pub edit_type: EditType,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub version: u32,
    pub items: Vec<BenchmarkItem>,
}

impl Manifest {
    pub fn item(&self, id: &str) -> Option<&BenchmarkItem> {
        self.items.iter().find(|i| i.id == id)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    version: u32,
    items: Vec<RawItem>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawItem {
    id: String,
    image: String,
    source_prompt: String,
    target_prompt: String,
    #[serde(default)]
    blend_source: Option<String>,
    #[serde(default)]
    blend_target: Option<String>,
    #[serde(default)]
    mask: Option<String>,
    edit_type: String,
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

/// Start of the first occurrence of `needle` as a contiguous run in `hay`.
pub fn find_run(hay: &[String], needle: &[String]) -> Option<usize> {
    if needle.is_empty() {
        return Some(0);
    }
    hay.windows(needle.len()).position(|w| w == needle)
}

fn manifest_err(item: Option<&str>, message: impl Into<String>) -> Error {
    Error::Manifest {
        item: item.map(str::to_string),
        message: message.into(),
    }
}

/// Parses and validates a manifest. Relative paths resolve against `base`.
pub fn parse_manifest(json: &str, base: &Path) -> Result<Manifest> {
    let raw: RawManifest = serde_json::from_str(json).map_err(|e| manifest_err(None, format!("malformed JSON: {e}")))?;
    if raw.version != MANIFEST_VERSION {
        return Err(manifest_err(None, format!("unsupported version {}", raw.version)));
    }
    let mut seen = HashSet::new();
    let mut items = Vec::with_capacity(raw.items.len());
    for r in raw.items {
        let id = r.id.as_str();
        let fail = |m: String| Err(manifest_err(Some(id), m));
        if id.is_empty() {
            return fail("empty id".into());
        }
        if !seen.insert(r.id.clone()) {
            return fail("duplicate id".into());
        }
        let Some(edit_type) = EditType::parse(&r.edit_type) else {
            return fail(format!("unknown edit_type `{}`", r.edit_type));
        };
        let image = match r.image.strip_prefix("seed:") {
            Some(n) => match n.parse() {
                Ok(seed) => ImageRef::Synthetic(seed),
                Err(_) => return fail(format!("bad synthetic image ref `{}`", r.image)),
            },
            None => ImageRef::Latent(base.join(&r.image)),
        };
        let (source_prompt, target_prompt) = (words(&r.source_prompt), words(&r.target_prompt));
        if source_prompt.is_empty() || target_prompt.is_empty() {
            return fail("prompts must be non-empty".into());
        }
        let blend = if r.blend_source.is_some() || r.blend_target.is_some() {
            let span = BlendSpan {
                source: words(r.blend_source.as_deref().unwrap_or("")),
                target: words(r.blend_target.as_deref().unwrap_or("")),
            };
            if find_run(&source_prompt, &span.source).is_none() {
                return fail(format!("blend_source `{}` not in source prompt", span.source.join(" ")));
            }
            if find_run(&target_prompt, &span.target).is_none() {
                return fail(format!("blend_target `{}` not in target prompt", span.target.join(" ")));
            }
            Some(span)
        } else {
            None
        };
        let mask = r.mask.as_ref().map(|m| base.join(m));
        if mask.is_none() && !edit_type.mask_optional() && !matches!(image, ImageRef::Synthetic(_)) {
            return fail(format!("edit type {} requires a mask", edit_type.as_str()));
        }
        items.push(BenchmarkItem {
            id: r.id,
            image,
            source_prompt,
            target_prompt,
            blend,
            mask,
            edit_type,
        });
    }
    Ok(Manifest {
        version: raw.version,
        items,
    })
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path)?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new(".")))
}

/// One contiguous region where the prompts differ.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DiffHunk {
    pub source_start: usize,
    pub source: Vec<String>,
    pub target_start: usize,
    pub target: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PromptDiff {
    pub hunks: Vec<DiffHunk>,
}

impl PromptDiff {
    pub fn is_empty(&self) -> bool {
        self.hunks.is_empty()
    }

    pub fn source_words(&self) -> Vec<String> {
        self.hunks.iter().flat_map(|h| h.source.iter().cloned()).collect()
    }

    pub fn target_words(&self) -> Vec<String> {
        self.hunks.iter().flat_map(|h| h.target.iter().cloned()).collect()
    }

    /// Source word positions covered by the hunks.
    pub fn source_positions(&self) -> Vec<usize> {
        self.hunks
            .iter()
            .flat_map(|h| h.source_start..h.source_start + h.source.len())
            .collect()
    }

    /// Rewrites `source` by replacing every hunk's source run with its target run.
    pub fn apply<S: AsRef<str>>(&self, source: &[S]) -> Vec<String> {
        let mut out = Vec::new();
        let mut pos = 0;
        for h in &self.hunks {
            out.extend(source[pos..h.source_start].iter().map(|s| s.as_ref().to_string()));
            out.extend(h.target.iter().cloned());
            pos = h.source_start + h.source.len();
        }
        out.extend(source[pos..].iter().map(|s| s.as_ref().to_string()));
        out
    }
}

/// Word-level LCS alignment of two prompts. When several alignments are
/// optimal, matches are taken as late as possible in the source, so leading
/// extra words are reported as one deletion.
pub fn diff_prompts<S: AsRef<str>>(source: &[S], target: &[S]) -> PromptDiff {
    let (n, m) = (source.len(), target.len());
    let eq = |i: usize, j: usize| source[i].as_ref() == target[j].as_ref();
    // lcs[i][j] = LCS of source[..i] and target[..j]
    let mut lcs = vec![vec![0u32; m + 1]; n + 1];
    for i in 1..=n {
        for j in 1..=m {
            lcs[i][j] = if eq(i - 1, j - 1) {
                lcs[i - 1][j - 1] + 1
            } else {
                lcs[i - 1][j].max(lcs[i][j - 1])
            };
        }
    }
    let mut matches = Vec::new();
    let (mut i, mut j) = (n, m);
    while i > 0 && j > 0 {
        if eq(i - 1, j - 1) {
            matches.push((i - 1, j - 1));
            i -= 1;
            j -= 1;
        } else if lcs[i - 1][j] >= lcs[i][j - 1] {
            i -= 1;
        } else {
            j -= 1;
        }
    }
    matches.reverse();
    matches.push((n, m));

    let mut hunks = Vec::new();
    let (mut si, mut ti) = (0, 0);
    for (ms, mt) in matches {
        if ms > si || mt > ti {
            hunks.push(DiffHunk {
                source_start: si,
                source: source[si..ms].iter().map(|s| s.as_ref().to_string()).collect(),
                target_start: ti,
                target: target[ti..mt].iter().map(|s| s.as_ref().to_string()).collect(),
            });
        }
        si = ms + 1;
        ti = mt + 1;
    }
    PromptDiff { hunks }
}

/// Source-prompt word positions to localize for `item`: the annotated blend
/// words if present, else the computed diff. Empty when the edit only inserts.
pub fn blend_positions(item: &BenchmarkItem) -> Vec<usize> {
    match &item.blend {
        Some(b) if !b.source.is_empty() => {
            let start = find_run(&item.source_prompt, &b.source).expect("validated at load");
            (start..start + b.source.len()).collect()
        }
        Some(_) => Vec::new(),
        None => diff_prompts(&item.source_prompt, &item.target_prompt).source_positions(),
    }
}

/// Reads an 8-bit grayscale image; pixels `>= 128` are set.
pub fn load_mask(path: &Path) -> Result<GroundTruthMask> {
    let err = |m: String| Error::Mask {
        path: path.to_path_buf(),
        message: m,
    };
    let img = image::ImageReader::open(path)
        .map_err(|e| err(e.to_string()))?
        .with_guessed_format()
        .map_err(|e| err(e.to_string()))?
        .decode()
        .map_err(|e| err(e.to_string()))?;
    let image::DynamicImage::ImageLuma8(gray) = img else {
        return Err(err(format!("expected 8-bit grayscale, got {:?}", img.color())));
    };
    let (w, h) = gray.dimensions();
    GroundTruthMask::new(w as usize, h as usize, gray.pixels().map(|p| p.0[0] >= 128).collect())
}

/// Writes a mask as an 8-bit grayscale PNG with values 0 / 255.
pub fn save_mask(mask: &GroundTruthMask, path: &Path) -> Result<()> {
    let px = mask.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
    let img = image::GrayImage::from_raw(mask.width as u32, mask.height as u32, px).expect("dims match");
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    write_atomic(path, &bytes)
}

/// A procedurally generated latent: smooth background plus one elliptical
/// object whose footprint is the ground-truth edit mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub latent: Grid,
    pub object_mask: GroundTruthMask,
}

impl SyntheticScene {
    pub fn generate(seed: u64, h: usize, w: usize, c: usize) -> Result<Self> {
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::InvalidConfig("synthetic scene needs non-zero dims".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let waves: Vec<(f64, f64, f64)> = (0..c)
            .map(|_| (rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0), rng.gen_range(0.0..std::f64::consts::TAU)))
            .collect();
        let offsets: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let cy = rng.gen_range(0.3..0.7) * h as f64;
        let cx = rng.gen_range(0.3..0.7) * w as f64;
        let ry = rng.gen_range(0.15..0.3) * h as f64;
        let rx = rng.gen_range(0.15..0.3) * w as f64;

        let mut data = Vec::with_capacity(h * w * c);
        let mut bits = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
                let inside = ((fy - cy) / ry).powi(2) + ((fx - cx) / rx).powi(2) <= 1.0;
                bits.push(inside);
                for (ch, &(ky, kx, phase)) in waves.iter().enumerate() {
                    let bg = 0.5 * (ky * fy / h as f64 * std::f64::consts::TAU + kx * fx / w as f64 * std::f64::consts::TAU + phase).sin();
                    data.push(if inside { bg * 0.2 + offsets[ch] } else { bg });
                }
            }
        }
        Ok(Self {
            latent: Grid::new(h, w, c, data)?,
            object_mask: GroundTruthMask::new(w, h, bits)?,
        })
    }
}

/// Loads a rank-3 `h × w × c` latent tensor.
pub fn load_latent(path: &Path) -> Result<Grid> {
    let t = Tensor::read(path)?;
    match *t.dims() {
        [h, w, c] => Grid::new(h as usize, w as usize, c as usize, t.to_f64()),
        _ => Err(Error::TensorFormat(format!("latent must be rank 3, got {:?}", t.dims()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(s: &str) -> Vec<String> {
        words(s)
    }

    const MINIMAL: &str = r#"{"version": 1, "items": [
        {"id": "a", "image": "seed:3", "source_prompt": "a red bird", "target_prompt": "a pink bird",
         "blend_source": null, "blend_target": null, "mask": null, "edit_type": "change-color"}]}"#;

    #[test]
    fn minimal_manifest() {
        let m = parse_manifest(MINIMAL, Path::new(".")).unwrap();
        assert_eq!(m.items.len(), 1);
        assert_eq!(m.items[0].image, ImageRef::Synthetic(3));
        assert_eq!(m.items[0].edit_type, EditType::ChangeColor);
        assert_eq!(blend_positions(&m.items[0]), vec![1]);
    }

    #[test]
    fn manifest_errors() {
        let dup = MINIMAL.replace("]}", r#", {"id": "a", "image": "seed:1", "source_prompt": "x", "target_prompt": "y", "edit_type": "change-object"}]}"#);
        let e = parse_manifest(&dup, Path::new(".")).unwrap_err().to_string();
        assert!(e.contains("duplicate id") && e.contains("`a`"), "{e}");
        let resize = MINIMAL.replace("change-color", "resize");
        let e = parse_manifest(&resize, Path::new(".")).unwrap_err().to_string();
        assert!(e.contains("resize"), "{e}");
        assert!(parse_manifest("{not json", Path::new(".")).is_err());
        let needs_mask = MINIMAL.replace("seed:3", "latent.tnsr");
        assert!(parse_manifest(&needs_mask, Path::new(".")).is_err());
        let bad_blend = MINIMAL.replace(r#""blend_source": null"#, r#""blend_source": "blue""#);
        assert!(parse_manifest(&bad_blend, Path::new(".")).is_err());
        let v2 = MINIMAL.replace(r#""version": 1"#, r#""version": 2"#);
        assert!(parse_manifest(&v2, Path::new(".")).is_err());
    }

    #[test]
    fn blend_override_wins() {
        let j = MINIMAL
            .replace(r#""blend_source": null"#, r#""blend_source": "bird""#)
            .replace(r#""blend_target": null"#, r#""blend_target": "bird""#);
        let m = parse_manifest(&j, Path::new(".")).unwrap();
        assert_eq!(blend_positions(&m.items[0]), vec![2]);
    }

    #[test]
    fn edit_types_round_trip_names() {
        for t in EditType::ALL {
            assert_eq!(EditType::parse(t.as_str()), Some(t));
        }
        assert!(EditType::DeleteObject.mask_optional());
        assert!(!EditType::ChangeText.mask_optional());
    }

    #[test]
    fn diff_examples() {
        assert!(diff_prompts(&w("a red bird"), &w("a red bird")).is_empty());
        let d = diff_prompts(&w("a red bird"), &w("a pink bird"));
        assert_eq!(d.source_words(), w("red"));
        assert_eq!(d.target_words(), w("pink"));
        let d = diff_prompts(&w("a bee hovering near a jar"), &w("a jar"));
        assert_eq!(d.source_words(), w("a bee hovering near"));
        assert!(d.target_words().is_empty());
        assert_eq!(d.source_positions(), vec![0, 1, 2, 3]);
    }

    /// Exhaustive LCS length by recursion, for tiny inputs.
    fn lcs_len(a: &[String], b: &[String]) -> usize {
        match (a.split_first(), b.split_first()) {
            (Some((x, ar)), Some((y, br))) => {
                if x == y {
                    1 + lcs_len(ar, br)
                } else {
                    lcs_len(ar, b).max(lcs_len(a, br))
                }
            }
            _ => 0,
        }
    }

    #[test]
    fn diff_keeps_a_longest_common_subsequence() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let vocab = ["a", "b", "c", "d"];
        for _ in 0..300 {
            let s: Vec<String> = (0..rng.gen_range(1..7)).map(|_| vocab[rng.gen_range(0..4)].to_string()).collect();
            let t: Vec<String> = (0..rng.gen_range(1..7)).map(|_| vocab[rng.gen_range(0..4)].to_string()).collect();
            let d = diff_prompts(&s, &t);
            assert_eq!(d.apply(&s), t);
            let changed: usize = d.hunks.iter().map(|h| h.source.len()).sum();
            assert_eq!(s.len() - changed, lcs_len(&s, &t));
        }
    }

    #[test]
    fn mask_png_threshold_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let img = image::GrayImage::from_raw(2, 2, vec![127, 128, 0, 255]).unwrap();
        img.save(&p).unwrap();
        assert_eq!(load_mask(&p).unwrap().bits, vec![false, true, false, true]);

        let white = dir.path().join("w.png");
        image::GrayImage::from_raw(3, 1, vec![255; 3]).unwrap().save(&white).unwrap();
        assert!(load_mask(&white).unwrap().bits.iter().all(|&b| b));
        let black = dir.path().join("b.png");
        image::GrayImage::from_raw(3, 1, vec![0; 3]).unwrap().save(&black).unwrap();
        assert!(load_mask(&black).unwrap().bits.iter().all(|&b| !b));

        let m = GroundTruthMask::new(3, 2, vec![true, false, true, true, false, false]).unwrap();
        let q = dir.path().join("q.png");
        save_mask(&m, &q).unwrap();
        assert_eq!(load_mask(&q).unwrap(), m);

        let rgb = dir.path().join("rgb.png");
        image::RgbImage::from_raw(1, 1, vec![255, 255, 255]).unwrap().save(&rgb).unwrap();
        assert!(matches!(load_mask(&rgb), Err(Error::Mask { .. })));
        assert!(load_mask(&dir.path().join("missing.png")).is_err());
    }

    #[test]
    fn synthetic_scene_is_deterministic() {
        let a = SyntheticScene::generate(5, 16, 16, 4).unwrap();
        let b = SyntheticScene::generate(5, 16, 16, 4).unwrap();
        assert_eq!(a, b);
        assert!(a.object_mask.is_informative());
        assert_ne!(SyntheticScene::generate(6, 16, 16, 4).unwrap(), a);
    }
}
