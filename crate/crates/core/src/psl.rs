//! Semantic localization from joint attention.
//!
//! The raw signal is the visual → text block of the joint attention, averaged
//! over every captured layer and head. It is sharpened in two ways before
//! being normalized to [0, 1]:
//!
//! * right-multiplying by the inverse of the fused text self-attention
//!   removes attention that leaks between coupled words, and
//! * left-multiplying by the row-normalized visual self-attention spreads the
//!   selected column over visually similar tokens, filling holes.

use std::path::Path;

use crate::error::{Error, Result};
use crate::mmdit::{split_quadrants, ForwardOptions, JointAttentionRecord, LatentState, Model, PromptTokens, WordSpan};
use crate::numerics::{minmax_normalize, ridge_inverse, Matrix, Vector};
use crate::tensorfile::{write_atomic, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelfAttention {
    Visual,
    Textual,
}

/// How several selected text columns are reduced to one map.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Mean,
    Max,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedMaps {
    /// M × N
    pub cross: Matrix,
    /// M × M, row-stochastic
    pub visual_affinity: Matrix,
    /// N × N, row-stochastic
    pub textual: Matrix,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl FusedMaps {
    pub fn from_records(records: &[JointAttentionRecord]) -> Result<Self> {
        let first = records.first().ok_or(Error::NoRecords)?;
        Ok(Self {
            cross: fuse_cross(records)?,
            visual_affinity: fuse_self(records, SelfAttention::Visual)?,
            textual: fuse_self(records, SelfAttention::Textual)?,
            grid_h: first.layout.grid_h,
            grid_w: first.layout.grid_w,
        })
    }
}

/// Sorted token indices into the prompt.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Selection {
    indices: Vec<usize>,
}

impl Selection {
    pub fn new(mut indices: Vec<usize>) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::EmptySelection);
        }
        indices.sort_unstable();
        indices.dedup();
        Ok(Self { indices })
    }

    /// Every token of the words at positions `words` in the prompt.
    pub fn from_word_positions(spans: &[WordSpan], words: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut idx = Vec::new();
        for w in words {
            let span = spans.get(w).ok_or(Error::SelectionOutOfRange {
                index: w,
                n_text: spans.len(),
            })?;
            idx.extend(span.first..=span.last);
        }
        Self::new(idx)
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

/// Per-visual-token localization score in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct RefinedMap {
    pub values: Vector,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl RefinedMap {
    pub fn new(values: Vec<f64>, grid_h: usize, grid_w: usize) -> Result<Self> {
        if values.len() != grid_h * grid_w {
            return Err(Error::shape("RefinedMap", grid_h * grid_w, values.len()));
        }
        Ok(Self {
            values: Vector(values),
            grid_h,
            grid_w,
        })
    }

    pub fn filled(grid_h: usize, grid_w: usize, v: f64) -> Self {
        Self {
            values: Vector(vec![v; grid_h * grid_w]),
            grid_h,
            grid_w,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.values.as_slice()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::f32(vec![self.grid_h as u64, self.grid_w as u64], self.as_slice())
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.dims() {
            &[h, w] => Self::new(t.to_f64(), h as usize, w as usize),
            dims => Err(Error::TensorFormat(format!("map tensor must be rank 2, got {dims:?}"))),
        }
    }

    /// 8-bit grayscale pixels, `round(255 · value)`.
    pub fn to_gray8(&self) -> Vec<u8> {
        self.as_slice()
            .iter()
            .map(|&v| (255.0 * v.clamp(0.0, 1.0)).round() as u8)
            .collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img = image::GrayImage::from_raw(self.grid_w as u32, self.grid_h as u32, self.to_gray8())
            .expect("buffer matches dims");
        let mut bytes = Vec::new();
        img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        write_atomic(path, &bytes)
    }
}

fn check_layouts(records: &[JointAttentionRecord]) -> Result<&JointAttentionRecord> {
    let first = records.first().ok_or(Error::NoRecords)?;
    for r in &records[1..] {
        let (a, b) = (&first.layout, &r.layout);
        if (a.n_text, a.n_visual, a.grid_h, a.grid_w) != (b.n_text, b.n_visual, b.grid_h, b.grid_w) {
            return Err(Error::shape(
                "attention fusion",
                format!("layout {}+{} tokens", a.n_text, a.n_visual),
                format!("layer {} head {} with {}+{}", r.layer, r.head, b.n_text, b.n_visual),
            ));
        }
    }
    Ok(first)
}

/// Element-wise mean of `blocks`. Each element is summed in sorted order so
/// the result does not depend on record order.
fn mean_blocks(blocks: &[Matrix]) -> Matrix {
    let (rows, cols) = blocks[0].shape();
    let n = blocks.len() as f64;
    let mut scratch = Vec::with_capacity(blocks.len());
    let mut out = Matrix::zeros(rows, cols);
    for (i, o) in out.data_mut().iter_mut().enumerate() {
        scratch.clear();
        scratch.extend(blocks.iter().map(|b| b.data()[i]));
        scratch.sort_by(f64::total_cmp);
        *o = scratch.iter().sum::<f64>() / n;
    }
    out
}

/// Mean visual → text attention over all records (M × N).
pub fn fuse_cross(records: &[JointAttentionRecord]) -> Result<Matrix> {
    check_layouts(records)?;
    let blocks = records
        .iter()
        .map(|r| split_quadrants(r).map(|q| q.vt))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_blocks(&blocks))
}

/// Mean visual or textual self-attention, each row rescaled to sum to one.
pub fn fuse_self(records: &[JointAttentionRecord], which: SelfAttention) -> Result<Matrix> {
    check_layouts(records)?;
    let blocks = records
        .iter()
        .map(|r| {
            split_quadrants(r).map(|q| match which {
                SelfAttention::Visual => q.vv,
                SelfAttention::Textual => q.tt,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut fused = mean_blocks(&blocks);
    for r in 0..fused.rows() {
        let row = fused.row_mut(r);
        let sum: f64 = row.iter().sum();
        if !(sum > 0.0) {
            return Err(Error::DegenerateRow(r));
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    Ok(fused)
}

/// Reduces the selected columns of `m` to a single length-M vector.
pub fn select_and_aggregate(m: &Matrix, sel: &Selection, agg: Aggregation) -> Result<Vector> {
    if let Some(&bad) = sel.indices().iter().find(|&&j| j >= m.cols()) {
        return Err(Error::SelectionOutOfRange {
            index: bad,
            n_text: m.cols(),
        });
    }
    let k = sel.indices().len() as f64;
    let out = (0..m.rows())
        .map(|r| {
            let picked = sel.indices().iter().map(|&j| m.get(r, j));
            match agg {
                Aggregation::Mean => picked.sum::<f64>() / k,
                Aggregation::Max => picked.fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect();
    Ok(Vector(out))
}

/// `norm(M_V · Select[cross · (M_T + εI)⁻¹])`.
pub fn refine(fused: &FusedMaps, sel: &Selection, epsilon: f64) -> Result<RefinedMap> {
    refine_with(fused, sel, epsilon, Aggregation::Mean)
}

pub fn refine_with(fused: &FusedMaps, sel: &Selection, epsilon: f64, agg: Aggregation) -> Result<RefinedMap> {
    let (m, n) = fused.cross.shape();
    if fused.textual.shape() != (n, n) || fused.visual_affinity.shape() != (m, m) {
        return Err(Error::shape(
            "refine",
            format!("M_T {n}x{n}, M_V {m}x{m}"),
            format!("M_T {:?}, M_V {:?}", fused.textual.shape(), fused.visual_affinity.shape()),
        ));
    }
    if fused.grid_h * fused.grid_w != m {
        return Err(Error::shape("refine", m, fused.grid_h * fused.grid_w));
    }
    let disentangled = fused.cross.matmul(&ridge_inverse(&fused.textual, epsilon)?)?;
    let selected = select_and_aggregate(&disentangled, sel, agg)?;
    let propagated = fused.visual_affinity.matvec(selected.as_slice())?;
    Ok(RefinedMap {
        values: minmax_normalize(&Vector(propagated)),
        grid_h: fused.grid_h,
        grid_w: fused.grid_w,
    })
}

/// One conditional forward pass at `z0.t` with attention capture on.
pub fn capture_attention(model: &Model, z0: &LatentState, prompt: &PromptTokens) -> Result<Vec<JointAttentionRecord>> {
    let opts = ForwardOptions {
        capture_attention: true,
        ..Default::default()
    };
    Ok(model.velocity(z0, prompt, z0.t, &opts)?.attention)
}

/// Localizes the selected source-prompt tokens in the clean latent.
pub fn localize(
    model: &Model,
    z0: &LatentState,
    prompt: &PromptTokens,
    sel: &Selection,
    epsilon: f64,
) -> Result<RefinedMap> {
    let records = capture_attention(model, z0, prompt)?;
    refine(&FusedMaps::from_records(&records)?, sel, epsilon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mmdit::TokenLayout;
    use crate::numerics::softmax_rows;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn random_record(rng: &mut ChaCha8Rng, layer: usize, head: usize, layout: &Arc<TokenLayout>) -> JointAttentionRecord {
        let t = layout.total();
        let logits = Matrix::from_fn(t, t, |_, _| rng.gen_range(-3.0..3.0));
        JointAttentionRecord {
            layer,
            head,
            matrix: softmax_rows(&logits).unwrap(),
            layout: Arc::clone(layout),
        }
    }

    fn layout(n: usize, h: usize, w: usize) -> Arc<TokenLayout> {
        Arc::new(TokenLayout::new(n, h, w, vec![]).unwrap())
    }

    #[test]
    fn fuse_cross_single_and_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lay = layout(2, 1, 3);
        let a = random_record(&mut rng, 0, 0, &lay);
        let b = random_record(&mut rng, 0, 1, &lay);
        let qa = split_quadrants(&a).unwrap().vt;
        let qb = split_quadrants(&b).unwrap().vt;
        assert_eq!(fuse_cross(std::slice::from_ref(&a)).unwrap(), qa);
        let pair = fuse_cross(&[a, b]).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                assert!((pair.get(i, j) - (qa.get(i, j) + qb.get(i, j)) / 2.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn fuse_cross_matches_summation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lay = layout(3, 2, 2);
        let recs: Vec<_> = (0..3)
            .flat_map(|l| (0..2).map(move |h| (l, h)))
            .map(|(l, h)| random_record(&mut rng, l, h, &lay))
            .collect();
        let fused = fuse_cross(&recs).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let mut s = 0.0;
                for r in &recs {
                    s += r.matrix.get(3 + i, j);
                }
                assert!((fused.get(i, j) - s / 6.0).abs() <= 1e-7);
            }
        }
    }

    #[test]
    fn fuse_self_oracle_and_row_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lay = layout(2, 2, 2);
        let recs: Vec<_> = (0..4).map(|i| random_record(&mut rng, i / 2, i % 2, &lay)).collect();
        for which in [SelfAttention::Visual, SelfAttention::Textual] {
            let fused = fuse_self(&recs, which).unwrap();
            let (off, n) = match which {
                SelfAttention::Visual => (2, 4),
                SelfAttention::Textual => (0, 2),
            };
            for i in 0..n {
                let mean: Vec<f64> = (0..n)
                    .map(|j| recs.iter().map(|r| r.matrix.get(off + i, off + j)).sum::<f64>() / 4.0)
                    .collect();
                let total: f64 = mean.iter().sum();
                for j in 0..n {
                    assert!((fused.get(i, j) - mean[j] / total).abs() <= 1e-12);
                }
                assert!((fused.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn fuse_self_keeps_stochastic_block() {
        // Block-diagonal joint matrix: VV is already row-stochastic.
        let lay = layout(1, 1, 2);
        let mut m = Matrix::zeros(3, 3);
        m.set(0, 0, 1.0);
        m.set(1, 1, 0.25);
        m.set(1, 2, 0.75);
        m.set(2, 1, 0.6);
        m.set(2, 2, 0.4);
        let rec = JointAttentionRecord { layer: 0, head: 0, matrix: m.clone(), layout: lay };
        let vv = fuse_self(&[rec], SelfAttention::Visual).unwrap();
        assert!(vv.max_abs_diff(&m.block(1, 1, 2, 2)) <= 1e-7);
    }

    #[test]
    fn fuse_self_degenerate_row() {
        let lay = layout(1, 1, 2);
        let mut m = Matrix::zeros(3, 3);
        m.set(0, 0, 1.0);
        m.set(1, 0, 1.0);
        m.set(2, 2, 1.0);
        let rec = JointAttentionRecord { layer: 0, head: 0, matrix: m, layout: lay };
        assert!(matches!(fuse_self(&[rec], SelfAttention::Visual), Err(Error::DegenerateRow(0))));
    }

    #[test]
    fn fusion_errors() {
        assert!(matches!(fuse_cross(&[]), Err(Error::NoRecords)));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_record(&mut rng, 0, 0, &layout(2, 1, 2));
        let b = random_record(&mut rng, 0, 1, &layout(1, 1, 3));
        assert!(fuse_cross(&[a, b]).is_err());
    }

    #[test]
    fn fusion_is_order_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let lay = layout(3, 3, 3);
        let mut recs: Vec<_> = (0..6).map(|i| random_record(&mut rng, i / 2, i % 2, &lay)).collect();
        let before = FusedMaps::from_records(&recs).unwrap();
        recs.reverse();
        recs.swap(1, 4);
        assert_eq!(FusedMaps::from_records(&recs).unwrap(), before);
    }

    #[test]
    fn select_examples() {
        let m = Matrix::from_rows(&[[1.0, 0.0, 1.0], [0.0, 1.0, 0.0]]);
        let one = Selection::new(vec![1]).unwrap();
        assert_eq!(select_and_aggregate(&m, &one, Aggregation::Mean).unwrap().0, vec![0.0, 1.0]);
        let same = Selection::new(vec![0, 2]).unwrap();
        assert_eq!(select_and_aggregate(&m, &same, Aggregation::Mean).unwrap().0, vec![1.0, 0.0]);
        let ab = Selection::new(vec![0, 1]).unwrap();
        assert_eq!(select_and_aggregate(&m, &ab, Aggregation::Mean).unwrap().0, vec![0.5, 0.5]);
        assert_eq!(select_and_aggregate(&m, &ab, Aggregation::Max).unwrap().0, vec![1.0, 1.0]);
        assert!(Selection::new(vec![]).is_err());
        let oob = Selection::new(vec![3]).unwrap();
        assert!(select_and_aggregate(&m, &oob, Aggregation::Mean).is_err());
    }

    fn random_stochastic(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
        let mut l = Matrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        for i in 0..n {
            l.set(i, i, l.get(i, i) + 3.0);
        }
        softmax_rows(&l).unwrap()
    }

    fn random_fused(rng: &mut ChaCha8Rng, h: usize, w: usize, n: usize) -> FusedMaps {
        let m = h * w;
        FusedMaps {
            cross: Matrix::from_fn(m, n, |_, _| rng.gen::<f64>()),
            visual_affinity: random_stochastic(rng, m),
            textual: random_stochastic(rng, n),
            grid_h: h,
            grid_w: w,
        }
    }

    #[test]
    fn refine_identity_collapses() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut f = random_fused(&mut rng, 3, 3, 4);
        f.textual = Matrix::identity(4);
        let sel = Selection::new(vec![1, 2]).unwrap();
        let one_sided = refine(&f, &sel, 0.0).unwrap();
        let expect = minmax_normalize(&Vector(
            f.visual_affinity
                .matvec(select_and_aggregate(&f.cross, &sel, Aggregation::Mean).unwrap().as_slice())
                .unwrap(),
        ));
        assert!(crate::numerics::max_abs_diff(one_sided.as_slice(), expect.as_slice()) <= 1e-12);

        f.visual_affinity = Matrix::identity(9);
        let both = refine(&f, &sel, 0.0).unwrap();
        let expect = minmax_normalize(&select_and_aggregate(&f.cross, &sel, Aggregation::Mean).unwrap());
        assert_eq!(both.values, expect);
    }

    /// Step-by-step dense recomputation using Gauss-Jordan elimination.
    fn refine_oracle(f: &FusedMaps, sel: &[usize], eps: f64) -> Vec<f64> {
        let n = f.textual.rows();
        let mut aug = vec![vec![0.0; 2 * n]; n];
        for i in 0..n {
            for j in 0..n {
                aug[i][j] = f.textual.get(i, j) + if i == j { eps } else { 0.0 };
            }
            aug[i][n + i] = 1.0;
        }
        for c in 0..n {
            let p = (c..n).max_by(|&a, &b| aug[a][c].abs().total_cmp(&aug[b][c].abs())).unwrap();
            aug.swap(c, p);
            let d = aug[c][c];
            for v in aug[c].iter_mut() {
                *v /= d;
            }
            for r in 0..n {
                if r != c {
                    let k = aug[r][c];
                    for j in 0..2 * n {
                        aug[r][j] -= k * aug[c][j];
                    }
                }
            }
        }
        let m = f.cross.rows();
        let mut sel_vec = vec![0.0; m];
        for i in 0..m {
            for &j in sel {
                let mut s = 0.0;
                for k in 0..n {
                    s += f.cross.get(i, k) * aug[k][n + j];
                }
                sel_vec[i] += s / sel.len() as f64;
            }
        }
        let mut prop = vec![0.0; m];
        for i in 0..m {
            for k in 0..m {
                prop[i] += f.visual_affinity.get(i, k) * sel_vec[k];
            }
        }
        let lo = prop.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = prop.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop.iter().map(|v| (v - lo) / (hi - lo)).collect()
    }

    #[test]
    fn refine_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = random_fused(&mut rng, 3, 3, 4);
        let sel = Selection::new(vec![2]).unwrap();
        let got = refine(&f, &sel, 1e-6).unwrap();
        let want = refine_oracle(&f, &[2], 1e-6);
        assert!(crate::numerics::max_abs_diff(got.as_slice(), &want) <= 1e-6);
        assert_eq!(got.values.argmax(), crate::numerics::argmax(&want));
    }

    #[test]
    fn aggregation_commutes_with_affinity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = random_fused(&mut rng, 4, 4, 5);
        let sel = Selection::new(vec![0, 3, 4]).unwrap();
        let mean_first = f
            .visual_affinity
            .matvec(select_and_aggregate(&f.cross, &sel, Aggregation::Mean).unwrap().as_slice())
            .unwrap();
        let mut prop_first = vec![0.0; 16];
        for &j in sel.indices() {
            let col = f.visual_affinity.matvec(&f.cross.column(j)).unwrap();
            for (p, c) in prop_first.iter_mut().zip(col) {
                *p += c / 3.0;
            }
        }
        assert!(crate::numerics::max_abs_diff(&mean_first, &prop_first) <= 1e-9);
    }

    #[test]
    fn refine_insensitive_to_tiny_epsilon_with_identity_text() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut f = random_fused(&mut rng, 2, 4, 3);
        f.textual = Matrix::identity(3);
        let sel = Selection::new(vec![1]).unwrap();
        let a = refine(&f, &sel, 0.0).unwrap();
        let b = refine(&f, &sel, 1e-8).unwrap();
        assert!(crate::numerics::max_abs_diff(a.as_slice(), b.as_slice()) <= 1e-6);
    }

    #[test]
    fn flat_attention_gives_zero_map() {
        let lay = layout(2, 2, 2);
        let t = lay.total();
        let rec = JointAttentionRecord {
            layer: 0,
            head: 0,
            matrix: Matrix::from_fn(t, t, |_, _| 1.0 / t as f64),
            layout: lay,
        };
        let fused = FusedMaps::from_records(&[rec]).unwrap();
        let map = refine(&fused, &Selection::new(vec![0]).unwrap(), 1e-6).unwrap();
        assert!(map.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hot_region_fixture_localizes() {
        // Cells 0 and 1 attend strongly to token 1; everything else is diffuse.
        let lay = layout(3, 3, 3);
        let t = lay.total();
        let mut recs = Vec::new();
        for head in 0..2 {
            let mut m = Matrix::from_fn(t, t, |_, _| 1.0);
            for cell in [0usize, 1] {
                m.set(3 + cell, 1, 20.0);
            }
            for i in 0..t {
                m.set(i, i, 4.0);
                let s: f64 = m.row(i).iter().sum();
                m.row_mut(i).iter_mut().for_each(|v| *v /= s);
            }
            recs.push(JointAttentionRecord { layer: 0, head, matrix: m, layout: Arc::clone(&lay) });
        }
        let fused = FusedMaps::from_records(&recs).unwrap();
        let map = refine(&fused, &Selection::new(vec![1]).unwrap(), 1e-6).unwrap();
        assert!(matches!(map.values.argmax(), Some(0) | Some(1)));
        // Two selections from one capture.
        let other = refine(&fused, &Selection::new(vec![2]).unwrap(), 1e-6).unwrap();
        assert_ne!(map, other);
    }

    #[test]
    fn gray8_rounding() {
        let m = RefinedMap::new(vec![0.0, 0.5, 1.0, 0.002], 2, 2).unwrap();
        assert_eq!(m.to_gray8(), vec![0, 128, 255, 1]);
    }
}
