//! Descriptor sampling, mutual nearest-neighbour matching, dense argmax
//! prediction and similarity heatmaps.

use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{domain, format, Result};
use crate::io::{read_csv, write_atomic, write_csv};
use crate::supervision::{DescriptorSet, NORMALIZE_EPS};
use crate::tensor::{l2_normalize_rows, FeatureMap, Role, Stride};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub a: [f64; 2],
    pub b: [f64; 2],
    pub index_a: usize,
    pub index_b: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchSet {
    pub matches: Vec<Match>,
    /// `(width, height)` in pixels of the source images, when known.
    pub size_a: Option<(f64, f64)>,
    pub size_b: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct MatchRow {
    xa: f64,
    ya: f64,
    xb: f64,
    yb: f64,
    score: f64,
}

impl MatchSet {
    pub fn new(matches: Vec<Match>) -> MatchSet {
        MatchSet { matches, size_a: None, size_b: None }
    }

    /// Pairs `a[i] ↔ b[i]` with unit scores.
    pub fn from_pairs(a: &[[f64; 2]], b: &[[f64; 2]]) -> Result<MatchSet> {
        if a.len() != b.len() {
            return domain(format!("{} points in a but {} in b", a.len(), b.len()));
        }
        Ok(MatchSet::new(
            a.iter()
                .zip(b)
                .enumerate()
                .map(|(i, (pa, pb))| Match { a: *pa, b: *pb, index_a: i, index_b: i, score: 1.0 })
                .collect(),
        ))
    }

    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    pub fn points_a(&self) -> Vec<[f64; 2]> {
        self.matches.iter().map(|m| m.a).collect()
    }

    pub fn points_b(&self) -> Vec<[f64; 2]> {
        self.matches.iter().map(|m| m.b).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let rows: Vec<MatchRow> = self
            .matches
            .iter()
            .map(|m| MatchRow { xa: m.a[0], ya: m.a[1], xb: m.b[0], yb: m.b[1], score: m.score })
            .collect();
        write_csv(path, &rows, &["xa", "ya", "xb", "yb", "score"])
    }

    pub fn read_csv(path: &Path) -> Result<MatchSet> {
        let rows: Vec<MatchRow> = read_csv(path)?;
        let matches = rows
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                if [r.xa, r.ya, r.xb, r.yb, r.score].iter().all(|v| v.is_finite()) {
                    Ok(Match { a: [r.xa, r.ya], b: [r.xb, r.yb], index_a: i, index_b: i, score: r.score })
                } else {
                    format(format!("{}: row {} has non-finite values", path.display(), i + 1))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MatchSet::new(matches))
    }
}

/// Descriptors read at image-pixel keypoints, optionally L2-normalized.
pub fn sample_descriptors(map: &FeatureMap, keypoints: &[[f64; 2]], normalize: bool) -> Result<DescriptorSet> {
    let mut vectors = map.sample_at_pixels(keypoints)?;
    if normalize {
        l2_normalize_rows(&mut vectors, NORMALIZE_EPS);
    }
    DescriptorSet::new(vectors, keypoints.to_vec())
}

/// Index of the largest entry; ties go to the lowest index.
fn argmax(values: impl Iterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Mutual nearest neighbours under the inner product. Ties break toward
/// the lowest index in both directions.
pub fn mutual_nn_match(da: &DescriptorSet, db: &DescriptorSet) -> Result<MatchSet> {
    if da.count() == 0 || db.count() == 0 {
        return Ok(MatchSet::default());
    }
    if da.dim() != db.dim() {
        return domain(format!("descriptor dims differ: {} vs {}", da.dim(), db.dim()));
    }
    let s = da.vectors.dot(&db.vectors.t());
    let best_b: Vec<usize> = s.rows().into_iter().map(|r| argmax(r.iter().copied()).unwrap()).collect();
    let best_a: Vec<usize> = s.columns().into_iter().map(|c| argmax(c.iter().copied()).unwrap()).collect();
    let matches = best_b
        .iter()
        .enumerate()
        .filter(|(i, j)| best_a[**j] == *i)
        .map(|(i, &j)| Match { a: da.keypoints[i], b: db.keypoints[j], index_a: i, index_b: j, score: s[[i, j]] })
        .collect();
    Ok(MatchSet::new(matches))
}

/// For each query row, the cell of `target` with the highest inner product
/// (lowest linear index on ties).
pub fn dense_argmax_cells(queries: ArrayView2<f64>, target: &FeatureMap) -> Result<Vec<usize>> {
    if queries.ncols() != target.channels() {
        return domain(format!("query dim {} but target has {} channels", queries.ncols(), target.channels()));
    }
    let sims = queries.dot(&target.matrix().t());
    Ok(sims.rows().into_iter().map(|r| argmax(r.iter().copied()).unwrap_or(0)).collect())
}

/// Dense argmax prediction in image pixels (the winning cell's center).
/// Query descriptors and target cells are L2-normalized when `normalize` is set.
pub fn dense_argmax(queries: &DescriptorSet, target: &FeatureMap, normalize: bool) -> Result<Vec<[f64; 2]>> {
    let (q, t) = if normalize {
        (queries.normalized().vectors, target.l2_normalize_channels(NORMALIZE_EPS)?)
    } else {
        (queries.vectors.clone(), target.clone())
    };
    let cells = dense_argmax_cells(q.view(), &t)?;
    Ok(cells
        .into_iter()
        .map(|c| target.grid_to_pixel([(c % target.width()) as f64, (c / target.width()) as f64]))
        .collect())
}

fn cosine_row(q: ArrayView1<f64>, target: &FeatureMap) -> Vec<f64> {
    let qn = q.dot(&q).sqrt().max(NORMALIZE_EPS);
    target
        .matrix()
        .rows()
        .into_iter()
        .map(|r| q.dot(&r) / (qn * r.dot(&r).sqrt().max(NORMALIZE_EPS)))
        .collect()
}

/// Cosine similarity between the query descriptor and every target cell,
/// affinely rescaled so the minimum is 0 and the maximum 1. A constant
/// similarity field maps to 0.5 everywhere.
pub fn similarity_heatmap(query_map: &FeatureMap, query_point: [f64; 2], target_map: &FeatureMap) -> Result<FeatureMap> {
    if query_map.channels() != target_map.channels() {
        return domain(format!(
            "query map has {} channels, target has {}",
            query_map.channels(),
            target_map.channels()
        ));
    }
    let q = query_map.sample_at_pixels(&[query_point])?;
    let raw = cosine_row(q.row(0), target_map);
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = if hi - lo > 0.0 {
        raw.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.5; raw.len()]
    };
    let data = Array2::from_shape_vec((scaled.len(), 1), scaled).expect("one value per cell");
    FeatureMap::new(target_map.height(), target_map.width(), target_map.stride(), Role::Unified, data)
}

/// Binary 8-bit PGM of the first channel, values in `[0, 1]` mapped to `0..=255`.
pub fn heatmap_pgm(map: &FeatureMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", map.width(), map.height()).into_bytes();
    out.extend(map.matrix().column(0).iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn write_heatmap_pgm(path: &Path, map: &FeatureMap) -> Result<()> {
    write_atomic(path, &heatmap_pgm(map))
}

/// Parses a binary PGM written by [`heatmap_pgm`] back into a 1-channel map.
pub fn read_heatmap_pgm(bytes: &[u8], stride: Stride) -> Result<FeatureMap> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return format("truncated PGM header");
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let parse = |s: &str| s.parse::<usize>().map_err(|_| crate::MatchaError::Format(format!("bad PGM field {s:?}")));
    if fields[0] != "P5" || parse(&fields[3])? != 255 {
        return format("not an 8-bit binary PGM");
    }
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let payload = bytes.get(pos..pos + w * h).ok_or_else(|| crate::MatchaError::Format("truncated PGM payload".into()))?;
    let data = Array2::from_shape_fn((w * h, 1), |(i, _)| payload[i] as f64 / 255.0);
    FeatureMap::new(h, w, stride, Role::Unified, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn brute_force(s: &Array2<f64>) -> Vec<(usize, usize)> {
        let (m, n) = s.dim();
        let mut out = Vec::new();
        for i in 0..m {
            let mut j_best = 0;
            for j in 0..n {
                if s[[i, j]] > s[[i, j_best]] {
                    j_best = j;
                }
            }
            let mut i_best = 0;
            for k in 0..m {
                if s[[k, j_best]] > s[[i_best, j_best]] {
                    i_best = k;
                }
            }
            if i_best == i {
                out.push((i, j_best));
            }
        }
        out
    }

    fn pairs(m: &MatchSet) -> Vec<(usize, usize)> {
        m.matches.iter().map(|x| (x.index_a, x.index_b)).collect()
    }

    #[test]
    fn identity_sets_match_themselves() {
        let d = DescriptorSet::from_vectors(array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let m = mutual_nn_match(&d, &d).unwrap();
        assert_eq!(pairs(&m), vec![(0, 0), (1, 1)]);
        assert!(m.matches.iter().all(|x| x.score == 1.0));
    }

    #[test]
    fn one_sided_neighbours_are_dropped() {
        // a0→b0, a1→b0, a2→b2; b0→a1, b1→a0, b2→a2: mutual pairs (1,0) and (2,2)
        let s = array![[0.9, 0.8, 0.1], [0.95, 0.2, 0.1], [0.0, 0.1, 0.5]];
        assert_eq!(brute_force(&s), vec![(1, 0), (2, 2)]);
        // the 3×3 table with a single reciprocated pair
        let s = array![[0.5, 0.9, 0.1], [0.2, 0.95, 0.3], [0.1, 0.8, 0.2]];
        let da = DescriptorSet::from_vectors(s.clone()).unwrap();
        let db = DescriptorSet::from_vectors(Array2::eye(3)).unwrap();
        assert_eq!(pairs(&mutual_nn_match(&da, &db).unwrap()), vec![(1, 1)]);
    }

    #[test]
    fn closer_competitor_blocks_match() {
        let da = DescriptorSet::from_vectors(array![[1.0, 0.0], [0.6, 0.8]]).unwrap();
        let db = DescriptorSet::from_vectors(array![[1.0, 0.0], [0.7, 0.714]]).unwrap();
        let m = mutual_nn_match(&da, &db).unwrap();
        assert_eq!(pairs(&m), brute_force(&da.vectors.dot(&db.vectors.t())));
    }

    #[test]
    fn empty_and_mismatched_sets() {
        let empty = DescriptorSet::from_vectors(Array2::zeros((0, 3))).unwrap();
        let d = DescriptorSet::from_vectors(Array2::ones((2, 3))).unwrap();
        assert!(mutual_nn_match(&empty, &d).unwrap().is_empty());
        let d2 = DescriptorSet::from_vectors(Array2::ones((2, 4))).unwrap();
        assert!(mutual_nn_match(&d, &d2).is_err());
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let d = DescriptorSet::from_vectors(Array2::ones((3, 2))).unwrap();
        assert_eq!(pairs(&mutual_nn_match(&d, &d).unwrap()), vec![(0, 0)]);
    }

    proptest! {
        #[test]
        fn matches_brute_force(m in 1usize..20, n in 1usize..20, d in 1usize..6, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            // coarse values so ties actually occur
            let a = Array2::from_shape_fn((m, d), |_| rng.random_range(-2i32..3) as f64);
            let b = Array2::from_shape_fn((n, d), |_| rng.random_range(-2i32..3) as f64);
            let s = a.dot(&b.t());
            let got = mutual_nn_match(&DescriptorSet::from_vectors(a).unwrap(), &DescriptorSet::from_vectors(b).unwrap()).unwrap();
            prop_assert_eq!(pairs(&got), brute_force(&s));
        }
    }

    fn ramp() -> FeatureMap {
        FeatureMap::from_fn(1, 2, 1, Stride::integer(8), Role::Unified, |_, x, _| (x + 1) as f64).unwrap()
    }

    #[test]
    fn sample_descriptor_cases() {
        let m = FeatureMap::from_fn(2, 2, 2, Stride::integer(8), Role::Unified, |y, x, c| (y * 2 + x + c) as f64).unwrap();
        let d = sample_descriptors(&m, &[[11.5, 3.5]], false).unwrap();
        assert_eq!(d.vectors.row(0).to_vec(), vec![1.0, 2.0]);
        let d = sample_descriptors(&m, &[[11.5, 3.5]], true).unwrap();
        let n = 5f64.sqrt();
        assert!((d.vectors[[0, 0]] - 1.0 / n).abs() < 1e-15 && (d.vectors[[0, 1]] - 2.0 / n).abs() < 1e-15);
        let c = FeatureMap::constant(3, 3, &[1.0, -2.0], Stride::integer(4), Role::Unified).unwrap();
        let d = sample_descriptors(&c, &[[0.0, 0.0], [5.3, 7.1], [11.0, 2.0]], true).unwrap();
        assert!(d.vectors.rows().into_iter().all(|r| r == d.vectors.row(0)));
        // midpoint of a 1→2 ramp reads 1.5 raw
        let d = sample_descriptors(&ramp(), &[[7.5, 3.5]], false).unwrap();
        assert_eq!(d.vectors[[0, 0]], 1.5);
        assert_eq!(sample_descriptors(&ramp(), &[[7.5, 3.5]], true).unwrap().vectors[[0, 0]], 1.0);
        let err = sample_descriptors(&ramp(), &[[1.0, 1.0], [40.0, 1.0]], true).unwrap_err();
        assert!(err.to_string().contains("[1]"), "{err}");
    }

    #[test]
    fn heatmap_cases() {
        let m = FeatureMap::from_fn(3, 3, 2, Stride::integer(4), Role::Unified, |y, x, c| {
            let a = (y * 3 + x) as f64 * 0.6;
            if c == 0 { a.cos() } else { a.sin() }
        })
        .unwrap();
        let h = similarity_heatmap(&m, m.grid_to_pixel([1.0, 2.0]), &m).unwrap();
        let best = argmax(h.matrix().column(0).iter().copied()).unwrap();
        assert_eq!(best, 2 * 3 + 1);
        assert_eq!(h.matrix()[[best, 0]], 1.0);
        let q = FeatureMap::constant(2, 2, &[1.0, 0.0], Stride::integer(4), Role::Unified).unwrap();
        let t = FeatureMap::constant(2, 2, &[0.0, 1.0], Stride::integer(4), Role::Unified).unwrap();
        let h = similarity_heatmap(&q, [1.5, 1.5], &t).unwrap();
        assert!(h.matrix().iter().all(|v| *v == 0.5));
        let q = FeatureMap::constant(1, 1, &[1.0, 0.0], Stride::integer(4), Role::Unified).unwrap();
        let (s1, s2) = (0.2f64, 0.8f64);
        let t = FeatureMap::new(
            1,
            2,
            Stride::integer(4),
            Role::Unified,
            array![[s1, (1.0 - s1 * s1).sqrt()], [s2, (1.0 - s2 * s2).sqrt()]],
        )
        .unwrap();
        let h = similarity_heatmap(&q, [1.5, 1.5], &t).unwrap();
        assert_eq!(h.matrix().column(0).to_vec(), vec![0.0, 1.0]);
    }

    #[test]
    fn pgm_round_trip() {
        let m = FeatureMap::new(1, 3, Stride::integer(2), Role::Unified, array![[0.0], [0.5], [1.0]]).unwrap();
        let bytes = heatmap_pgm(&m);
        assert_eq!(&bytes[..11], b"P5\n3 1\n255\n");
        assert_eq!(&bytes[11..], &[0, 128, 255]);
        let back = read_heatmap_pgm(&bytes, Stride::integer(2)).unwrap();
        assert_eq!(back.matrix()[[2, 0]], 1.0);
        assert!(read_heatmap_pgm(b"P2\n1 1\n255\n\0", Stride::integer(2)).is_err());
    }

    #[test]
    fn dense_argmax_picks_first_on_constant_target() {
        let t = FeatureMap::constant(3, 4, &[1.0, 1.0], Stride::integer(8), Role::Unified).unwrap();
        let q = DescriptorSet::from_vectors(array![[0.3, 0.7], [-1.0, 2.0]]).unwrap();
        assert_eq!(dense_argmax(&q, &t, true).unwrap(), vec![[3.5, 3.5], [3.5, 3.5]]);
    }

    #[test]
    fn match_csv_round_trip() {
        let dir = std::env::temp_dir().join(format!("matcha-match-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("m.csv");
        let m = MatchSet::from_pairs(&[[1.0, 2.0]], &[[3.5, 4.0]]).unwrap();
        m.write_csv(&p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "xa,ya,xb,yb,score\n1.0,2.0,3.5,4.0,1.0\n");
        assert_eq!(MatchSet::read_csv(&p).unwrap().points_b(), vec![[3.5, 4.0]]);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
