//! Precomputed image features, the sentence-conditioned gate, and the
//! projection of (gated) image vectors into the shared space.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Mode, Tape, Tensor, Var};
use crate::vocab::INIT_STD;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeature {
    pub image_id: String,
    pub values: Vec<f64>,
}

/// Image features keyed by id, in file order, all of one width.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureSet {
    features: Vec<ImageFeature>,
    index: HashMap<String, usize>,
}

impl FeatureSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, feature: ImageFeature) -> Result<()> {
        if let Some(dim) = self.dim() {
            if feature.values.len() != dim {
                return Err(Error::Data(format!(
                    "image {} has {} dims, expected {dim}",
                    feature.image_id,
                    feature.values.len()
                )));
            }
        }
        if self.index.contains_key(&feature.image_id) {
            return Err(Error::Data(format!("duplicate image id {}", feature.image_id)));
        }
        self.index.insert(feature.image_id.clone(), self.features.len());
        self.features.push(feature);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.features.first().map(|f| f.values.len())
    }

    pub fn get(&self, id: &str) -> Option<&ImageFeature> {
        self.index.get(id).map(|&i| &self.features[i])
    }

    /// Like `get`, but an unknown id is a data error naming it.
    pub fn require(&self, id: &str) -> Result<&ImageFeature> {
        self.get(id)
            .ok_or_else(|| Error::Data(format!("unknown image id {id}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = &ImageFeature> {
        self.features.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.features.iter().map(|f| f.image_id.as_str())
    }

    /// Keeps only the listed ids, in the order given.
    pub fn subset<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut out = Self::new();
        for id in ids {
            if out.get(id).is_none() {
                out.insert(self.require(id)?.clone())?;
            }
        }
        Ok(out)
    }
}

/// Reads `image_id<TAB>v1 v2 ... vK` lines.
pub fn load_features(path: &Path) -> Result<FeatureSet> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut set = FeatureSet::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let lineno = n + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let (id, rest) = line
            .split_once('\t')
            .ok_or_else(|| Error::format(path, lineno, "expected image_id<TAB>values"))?;
        let values = rest
            .split_whitespace()
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| Error::format(path, lineno, format!("bad number {v:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if values.is_empty() {
            return Err(Error::format(path, lineno, "no feature values"));
        }
        if let Some(dim) = set.dim() {
            if values.len() != dim {
                return Err(Error::format(
                    path,
                    lineno,
                    format!("expected {dim} values, found {}", values.len()),
                ));
            }
        }
        if set.get(id).is_some() {
            return Err(Error::Data(format!("{}:{lineno}: duplicate image id {id}", path.display())));
        }
        set.insert(ImageFeature {
            image_id: id.to_string(),
            values,
        })?;
    }
    Ok(set)
}

/// Writes the same format `load_features` reads; values use shortest
/// round-trip formatting so reloading is exact.
pub fn save_features(path: &Path, set: &FeatureSet) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for f in set.iter() {
        let values: Vec<String> = f.values.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}\t{}", f.image_id, values.join(" ")).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateParams {
    /// `H x K`
    pub w_gate: Tensor,
    /// `1 x K`
    pub b_gate: Tensor,
    /// `K x H`, no bias.
    pub w_proj: Tensor,
}

impl GateParams {
    pub fn random<R: Rng + ?Sized>(hidden: usize, feature_dim: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, INIT_STD).unwrap();
        let mut draw = |rows: usize, cols: usize| {
            let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
            Tensor::matrix(rows, cols, data).unwrap()
        };
        Self {
            w_gate: draw(hidden, feature_dim),
            b_gate: draw(1, feature_dim),
            w_proj: draw(feature_dim, hidden),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.w_proj.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w_proj.cols()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GateVars {
    pub w_gate: Var,
    pub b_gate: Var,
    pub w_proj: Var,
}

impl GateVars {
    pub fn track(tape: &mut Tape, p: &GateParams) -> Self {
        Self {
            w_gate: tape.param(p.w_gate.clone()),
            b_gate: tape.param(p.b_gate.clone()),
            w_proj: tape.param(p.w_proj.clone()),
        }
    }

    pub fn frozen(tape: &mut Tape, p: &GateParams) -> Self {
        Self {
            w_gate: tape.constant(p.w_gate.clone()),
            b_gate: tape.constant(p.b_gate.clone()),
            w_proj: tape.constant(p.w_proj.clone()),
        }
    }
}

/// `z = σ(stop_gradient(u) W_gate + b_gate)` for each row of `u` (`m x H`).
pub fn compute_gate(tape: &mut Tape, u: Var, p: &GateVars) -> Result<Var> {
    let detached = tape.stop_gradient(u);
    let lin = tape.matmul(detached, p.w_gate)?;
    let pre = tape.add_row_bias(lin, p.b_gate)?;
    Ok(tape.sigmoid(pre))
}

/// `v = tanh((z * x) W_proj)` on already-dropped-out features; `z = None`
/// leaves the features ungated.
pub fn project_gated(tape: &mut Tape, x: Var, z: Option<Var>, w_proj: Var) -> Result<Var> {
    let gated = match z {
        Some(z) => tape.mul(z, x)?,
        None => x,
    };
    let lin = tape.matmul(gated, w_proj)?;
    Ok(tape.tanh(lin))
}

/// Dropout on the raw features, then gating and projection.
pub fn project_image<R: Rng + ?Sized>(
    tape: &mut Tape,
    x: Var,
    z: Option<Var>,
    w_proj: Var,
    p: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    let dropped = tape.dropout(x, p, mode, rng)?;
    project_gated(tape, dropped, z, w_proj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::sigmoid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn load_well_formed() {
        let f = tmp("a\t1 2 3 4\nb\t0.5 0 -1 2e-3\n");
        let set = load_features(f.path()).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.dim(), Some(4));
        assert_eq!(set.get("b").unwrap().values[3], 2e-3);
    }

    #[test]
    fn load_rejects_ragged_and_duplicates() {
        let f = tmp("a\t1 2 3 4\nb\t1 2 3\n");
        match load_features(f.path()) {
            Err(Error::Format { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let f = tmp("a\t1 2\na\t3 4\n");
        assert!(matches!(load_features(f.path()), Err(Error::Data(_))));
    }

    #[test]
    fn save_then_load_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut set = FeatureSet::new();
        for i in 0..5 {
            set.insert(ImageFeature {
                image_id: format!("img{i}"),
                values: (0..7).map(|_| rng.random_range(-1e3..1e3) / 3.0).collect(),
            })
            .unwrap();
        }
        let f = tempfile::NamedTempFile::new().unwrap();
        save_features(f.path(), &set).unwrap();
        let back = load_features(f.path()).unwrap();
        assert_eq!(set, back);
    }

    #[test]
    fn gate_at_zero_is_one_half() {
        let mut tape = Tape::new();
        let p = GateParams {
            w_gate: Tensor::filled(&[3, 5], 0.7),
            b_gate: Tensor::zeros(&[1, 5]),
            w_proj: Tensor::zeros(&[5, 3]),
        };
        let vars = GateVars::frozen(&mut tape, &p);
        let u = tape.constant(Tensor::zeros(&[1, 3]));
        let z = compute_gate(&mut tape, u, &vars).unwrap();
        assert!(tape.value(z).data().iter().all(|&x| x == 0.5));
    }

    #[test]
    fn saturated_bias_makes_gate_transparent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = GateParams::random(2, 3, &mut rng);
        p.b_gate = Tensor::filled(&[1, 3], 60.0);
        let mut tape = Tape::new();
        let vars = GateVars::frozen(&mut tape, &p);
        let u = tape.constant(Tensor::row(vec![0.3, -0.2]));
        let z = compute_gate(&mut tape, u, &vars).unwrap();
        assert!(tape.value(z).data().iter().all(|&x| (1.0 - x) < 1e-12));
        let x = tape.constant(Tensor::row(vec![1.0, -2.0, 0.5]));
        let gated = project_gated(&mut tape, x, Some(z), vars.w_proj).unwrap();
        let plain = project_gated(&mut tape, x, None, vars.w_proj).unwrap();
        for (a, b) in tape.value(gated).data().iter().zip(tape.value(plain).data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn two_dim_gate_by_hand() {
        // u = [1, -1], W = [[0.5, 2], [1, -1]], b = [0.1, 0.2]
        // uW + b = [0.5 - 1 + 0.1, 2 + 1 + 0.2] = [-0.4, 3.2]
        let mut tape = Tape::new();
        let p = GateParams {
            w_gate: Tensor::matrix(2, 2, vec![0.5, 2.0, 1.0, -1.0]).unwrap(),
            b_gate: Tensor::row(vec![0.1, 0.2]),
            w_proj: Tensor::zeros(&[2, 2]),
        };
        let vars = GateVars::frozen(&mut tape, &p);
        let u = tape.constant(Tensor::row(vec![1.0, -1.0]));
        let z = compute_gate(&mut tape, u, &vars).unwrap();
        let want = [sigmoid(-0.4), sigmoid(3.2)];
        for (a, b) in tape.value(z).data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn three_dim_projection_by_hand() {
        // x = [1, 2, -1], z = [0.5, 0, 1], x' = [0.5, 0, -1]
        // W_proj = [[1, 0], [5, 5], [0.5, -1]] -> x'W = [0.5 - 0.5, 0 + 1] = [0, 1]
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(vec![1.0, 2.0, -1.0]));
        let z = tape.constant(Tensor::row(vec![0.5, 0.0, 1.0]));
        let w = tape.constant(Tensor::matrix(3, 2, vec![1.0, 0.0, 5.0, 5.0, 0.5, -1.0]).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = project_image(&mut tape, x, Some(z), w, 0.0, Mode::Train, &mut rng).unwrap();
        let got = tape.value(v).data();
        assert!((got[0] - 0.0).abs() < 1e-15);
        assert!((got[1] - 1f64.tanh()).abs() < 1e-15);
    }

    #[test]
    fn zero_image_projects_to_zero_and_range_is_open() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = GateParams::random(4, 6, &mut rng);
        let mut tape = Tape::new();
        let vars = GateVars::frozen(&mut tape, &p);
        let u = tape.constant(Tensor::row(vec![0.5, -0.5, 1.0, 2.0]));
        let z = compute_gate(&mut tape, u, &vars).unwrap();
        assert!(tape.value(z).data().iter().all(|&g| g > 0.0 && g < 1.0));
        let x = tape.constant(Tensor::zeros(&[1, 6]));
        let v = project_image(&mut tape, x, Some(z), vars.w_proj, 0.5, Mode::Test, &mut rng).unwrap();
        assert!(tape.value(v).data().iter().all(|&x| x == 0.0));
        let x = tape.constant(Tensor::row(vec![3.0, -2.0, 5.0, 1.0, 0.0, 9.0]));
        let v = project_image(&mut tape, x, Some(z), vars.w_proj, 0.5, Mode::Train, &mut rng).unwrap();
        assert!(tape.value(v).data().iter().all(|&x| x > -1.0 && x < 1.0));
    }

    #[test]
    fn gate_blocks_gradient_into_sentence_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = GateParams::random(3, 4, &mut rng);
        let mut tape = Tape::new();
        let vars = GateVars::track(&mut tape, &p);
        let u = tape.param(Tensor::row(vec![0.2, -0.7, 1.1]));
        let z = compute_gate(&mut tape, u, &vars).unwrap();
        let l = tape.sum(z);
        let g = tape.backward(l).unwrap();
        assert!(g.get(u).unwrap().data().iter().all(|&x| x == 0.0));
        assert!(g.get(vars.w_gate).unwrap().data().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn zero_gate_component_masks_feature() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = GateParams::random(2, 4, &mut rng);
        let z = Tensor::row(vec![0.3, 0.0, 0.9, 0.0]);
        let project = |x: Vec<f64>| {
            let mut tape = Tape::new();
            let xv = tape.constant(Tensor::row(x));
            let zv = tape.constant(z.clone());
            let w = tape.constant(p.w_proj.clone());
            let v = project_gated(&mut tape, xv, Some(zv), w).unwrap();
            tape.value(v).data().to_vec()
        };
        let base = project(vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(base, project(vec![1.0, -50.0, 3.0, 99.0]));
        assert_ne!(base, project(vec![1.5, 2.0, 3.0, 4.0]));
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 5]));
        let z = tape.constant(Tensor::zeros(&[1, 4]));
        let w = tape.constant(Tensor::zeros(&[4, 2]));
        assert!(project_gated(&mut tape, x, Some(z), w).is_err());
        let p = GateParams::random(3, 4, &mut ChaCha8Rng::seed_from_u64(0));
        let vars = GateVars::frozen(&mut tape, &p);
        let u = tape.constant(Tensor::zeros(&[1, 2]));
        assert!(compute_gate(&mut tape, u, &vars).is_err());
    }
}
