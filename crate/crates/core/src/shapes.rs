//! Planar landmark datasets: CSV I/O, generalised Procrustes alignment,
//! per-species means and the kernel-width rule.

use std::collections::HashMap;
use std::io::{Read, Write};

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::phylo::{LeafOrder, PTree};

#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkRecord {
    pub species: String,
    pub specimen: String,
    /// `x1, y1, …, xn, yn`
    pub coords: Vec<f64>,
}

impl LandmarkRecord {
    pub fn point(&self, i: usize) -> [f64; 2] {
        [self.coords[2 * i], self.coords[2 * i + 1]]
    }

    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.coords)
    }
}

/// Specimens with a common landmark count.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkDataset {
    records: Vec<LandmarkRecord>,
    n_landmarks: usize,
}

impl LandmarkDataset {
    pub fn new(records: Vec<LandmarkRecord>) -> Result<Self> {
        let first = records.first().ok_or_else(|| Error::invalid("dataset has no records"))?;
        if first.coords.len() < 2 || first.coords.len() % 2 != 0 {
            return Err(Error::invalid(format!(
                "specimen {} has {} coordinates; expected an even, nonzero count",
                first.specimen,
                first.coords.len()
            )));
        }
        let n_landmarks = first.coords.len() / 2;
        for r in &records {
            if r.coords.len() != 2 * n_landmarks {
                return Err(Error::invalid(format!(
                    "specimen {} has {} landmarks, expected {n_landmarks}",
                    r.specimen,
                    r.coords.len() / 2
                )));
            }
            if r.coords.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("specimen {} has non-finite coordinates", r.specimen)));
            }
        }
        Ok(Self { records, n_landmarks })
    }

    pub fn records(&self) -> &[LandmarkRecord] {
        &self.records
    }

    pub fn n_landmarks(&self) -> usize {
        self.n_landmarks
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Reads `species,specimen,x1,y1,…,xn,yn` with a header row.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(input);
        let header = rdr.headers()?.clone();
        if header.len() < 4 || header.get(0) != Some("species") || header.get(1) != Some("specimen") {
            return Err(Error::invalid(
                "landmark CSV header must be species,specimen,x1,y1,…,xn,yn",
            ));
        }
        let mut records = Vec::new();
        for (line, row) in rdr.records().enumerate() {
            let row = row?;
            let coords = row
                .iter()
                .skip(2)
                .map(|s| {
                    s.parse::<f64>().map_err(|_| {
                        Error::invalid(format!("data row {}: cannot parse {s:?} as a number", line + 1))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            records.push(LandmarkRecord {
                species: row[0].to_string(),
                specimen: row[1].to_string(),
                coords,
            });
        }
        Self::new(records)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["species".to_string(), "specimen".to_string()];
        for i in 1..=self.n_landmarks {
            header.push(format!("x{i}"));
            header.push(format!("y{i}"));
        }
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![r.species.clone(), r.specimen.clone()];
            row.extend(r.coords.iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Records in leaf order; each leaf must match exactly one record.
    pub fn reconcile(&self, tree: &PTree) -> Result<(LeafOrder, Vec<LandmarkRecord>)> {
        let mut by_name: HashMap<&str, usize> = HashMap::new();
        for (i, r) in self.records.iter().enumerate() {
            if by_name.insert(&r.species, i).is_some() {
                return Err(Error::invalid(format!(
                    "species {:?} has several records; average them first",
                    r.species
                )));
            }
        }
        let order = LeafOrder::of(tree);
        let missing_in_data: Vec<String> =
            order.names().iter().filter(|n| !by_name.contains_key(n.as_str())).cloned().collect();
        let missing_in_tree: Vec<String> = self
            .records
            .iter()
            .filter(|r| tree.find_leaf(&r.species).is_none())
            .map(|r| r.species.clone())
            .collect();
        if !missing_in_data.is_empty() || !missing_in_tree.is_empty() {
            return Err(Error::Reconcile {
                missing_in_tree,
                missing_in_data,
            });
        }
        let rows = order.names().iter().map(|n| self.records[by_name[n.as_str()]].clone()).collect();
        Ok((order, rows))
    }
}

fn centroid(c: &[f64]) -> [f64; 2] {
    let n = (c.len() / 2) as f64;
    let (mut x, mut y) = (0.0, 0.0);
    for p in c.chunks_exact(2) {
        x += p[0];
        y += p[1];
    }
    [x / n, y / n]
}

/// Square root of the summed squared distances to the centroid.
pub fn centroid_size(c: &[f64]) -> f64 {
    let m = centroid(c);
    c.chunks_exact(2)
        .map(|p| (p[0] - m[0]).powi(2) + (p[1] - m[1]).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Angle of the rotation taking `a` closest to `b` (both centred).
fn optimal_angle(a: &[f64], b: &[f64]) -> f64 {
    let (mut cross, mut dot) = (0.0, 0.0);
    for (p, q) in a.chunks_exact(2).zip(b.chunks_exact(2)) {
        cross += p[0] * q[1] - p[1] * q[0];
        dot += p[0] * q[0] + p[1] * q[1];
    }
    cross.atan2(dot)
}

fn rotate(c: &mut [f64], theta: f64) {
    let (s, co) = theta.sin_cos();
    for p in c.chunks_exact_mut(2) {
        let (x, y) = (p[0], p[1]);
        p[0] = co * x - s * y;
        p[1] = s * x + co * y;
    }
}

/// Similarity fit of `shape` onto `target`: centre, optionally match
/// centroid size, then rotate.
pub fn align_to(shape: &[f64], target: &[f64], match_size: bool) -> Result<Vec<f64>> {
    if shape.len() != target.len() {
        return Err(Error::DimensionMismatch {
            expected: target.len(),
            found: shape.len(),
        });
    }
    let mut s = shape.to_vec();
    let m = centroid(&s);
    for p in s.chunks_exact_mut(2) {
        p[0] -= m[0];
        p[1] -= m[1];
    }
    let mut t = target.to_vec();
    let mt = centroid(&t);
    for p in t.chunks_exact_mut(2) {
        p[0] -= mt[0];
        p[1] -= mt[1];
    }
    if match_size {
        let (cs, ct) = (centroid_size(&s), centroid_size(&t));
        if cs < 1e-12 {
            return Err(Error::invalid("cannot scale a degenerate shape"));
        }
        s.iter_mut().for_each(|v| *v *= ct / cs);
    }
    let theta = optimal_angle(&s, &t);
    rotate(&mut s, theta);
    Ok(s)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GpaOptions {
    pub keep_scale: bool,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for GpaOptions {
    fn default() -> Self {
        Self {
            keep_scale: false,
            tol: 1e-10,
            max_iter: 200,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GpaResult {
    pub dataset: LandmarkDataset,
    /// Unit-size mean shape.
    pub mean: Vec<f64>,
    /// Summed squared distances to the (unnormalised) mean after each pass.
    pub objective: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Generalised Procrustes alignment: centre, scale to unit centroid size
/// (unless `keep_scale`), then rotate every shape onto the running mean
/// until the normalised mean moves less than `tol`.
pub fn procrustes_align(ds: &LandmarkDataset, opts: &GpaOptions) -> Result<GpaResult> {
    if ds.len() < 2 {
        return Err(Error::invalid("Procrustes alignment needs at least two shapes"));
    }
    let mut shapes: Vec<Vec<f64>> = Vec::with_capacity(ds.len());
    for r in ds.records() {
        let size = centroid_size(&r.coords);
        if !(size > 1e-12) {
            return Err(Error::invalid(format!(
                "specimen {:?} of {:?} is degenerate (all landmarks coincide)",
                r.specimen, r.species
            )));
        }
        let m = centroid(&r.coords);
        let scale = if opts.keep_scale { 1.0 } else { 1.0 / size };
        shapes.push(
            r.coords
                .chunks_exact(2)
                .flat_map(|p| [(p[0] - m[0]) * scale, (p[1] - m[1]) * scale])
                .collect(),
        );
    }
    let n = shapes.len() as f64;
    let mean_of = |shapes: &[Vec<f64>]| -> Vec<f64> {
        let mut m = vec![0.0; shapes[0].len()];
        for s in shapes {
            for (a, b) in m.iter_mut().zip(s) {
                *a += b;
            }
        }
        m.iter_mut().for_each(|v| *v /= n);
        m
    };
    let objective_of = |shapes: &[Vec<f64>], mean: &[f64]| -> f64 {
        shapes
            .iter()
            .map(|s| s.iter().zip(mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            .sum()
    };
    let normalise = |m: &[f64]| -> Vec<f64> {
        let s = m.iter().map(|v| v * v).sum::<f64>().sqrt();
        m.iter().map(|v| v / s).collect()
    };

    let mut reference = normalise(&shapes[0]);
    let mut objective = vec![objective_of(&shapes, &mean_of(&shapes))];
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=opts.max_iter {
        iterations = it;
        for s in shapes.iter_mut() {
            let theta = optimal_angle(s, &reference);
            rotate(s, theta);
        }
        let mean = mean_of(&shapes);
        objective.push(objective_of(&shapes, &mean));
        let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::numeric("Procrustes mean shape collapsed to a point"));
        }
        let next = normalise(&mean);
        let change = next.iter().zip(&reference).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        reference = next;
        if change < opts.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("Procrustes alignment stopped after {iterations} passes without converging");
    }
    let records = ds
        .records()
        .iter()
        .zip(shapes)
        .map(|(r, coords)| LandmarkRecord {
            species: r.species.clone(),
            specimen: r.specimen.clone(),
            coords,
        })
        .collect();
    Ok(GpaResult {
        dataset: LandmarkDataset::new(records)?,
        mean: reference,
        objective,
        iterations,
        converged,
    })
}

/// Coordinate-wise mean of the specimens of each species, in order of first
/// appearance. Specimen ids become `mean` (or pass through for singletons).
pub fn species_mean(ds: &LandmarkDataset) -> Result<LandmarkDataset> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, Vec<&LandmarkRecord>> = HashMap::new();
    for r in ds.records() {
        groups
            .entry(&r.species)
            .or_insert_with(|| {
                order.push(&r.species);
                Vec::new()
            })
            .push(r);
    }
    let records = order
        .into_iter()
        .map(|sp| {
            let g = &groups[sp];
            if g.len() == 1 {
                return g[0].clone();
            }
            let mut coords = vec![0.0; g[0].coords.len()];
            for r in g {
                for (a, b) in coords.iter_mut().zip(&r.coords) {
                    *a += b;
                }
            }
            coords.iter_mut().for_each(|v| *v /= g.len() as f64);
            LandmarkRecord {
                species: sp.to_string(),
                specimen: "mean".to_string(),
                coords,
            }
        })
        .collect();
    LandmarkDataset::new(records)
}

/// 1.5 times the average over shapes of the mean pairwise landmark distance.
pub fn sigma_rule(ds: &LandmarkDataset) -> Result<f64> {
    let n = ds.n_landmarks();
    if n < 2 {
        return Err(Error::invalid("the kernel-width rule needs at least two landmarks"));
    }
    let pairs = (n * (n - 1) / 2) as f64;
    let total: f64 = ds
        .records()
        .iter()
        .map(|r| {
            let mut s = 0.0;
            for i in 0..n {
                for j in i + 1..n {
                    let (a, b) = (r.point(i), r.point(j));
                    s += (a[0] - b[0]).hypot(a[1] - b[1]);
                }
            }
            s / pairs
        })
        .sum();
    Ok(1.5 * total / ds.len() as f64)
}
