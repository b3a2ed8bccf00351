//! Material/context co-occurrence tables, conditional distributions and
//! entropies.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::context::Hierarchy;
use crate::error::{Error, Result};

/// Counts indexed `[material][context]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CooccurrenceTable {
    materials: Vec<String>,
    contexts: Vec<String>,
    counts: Vec<Vec<u64>>,
}

fn index_of(names: &[String]) -> HashMap<&str, usize> {
    names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect()
}

impl CooccurrenceTable {
    pub fn new(materials: Vec<String>, contexts: Vec<String>) -> Self {
        let counts = vec![vec![0; contexts.len()]; materials.len()];
        CooccurrenceTable {
            materials,
            contexts,
            counts,
        }
    }

    pub fn from_counts(materials: Vec<String>, contexts: Vec<String>, counts: Vec<Vec<u64>>) -> Result<Self> {
        if counts.len() != materials.len() || counts.iter().any(|r| r.len() != contexts.len()) {
            return Err(Error::shape(format!(
                "counts must be {}×{}",
                materials.len(),
                contexts.len()
            )));
        }
        Ok(CooccurrenceTable {
            materials,
            contexts,
            counts,
        })
    }

    pub fn materials(&self) -> &[String] {
        &self.materials
    }

    pub fn contexts(&self) -> &[String] {
        &self.contexts
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn count(&self, material: usize, context: usize) -> u64 {
        self.counts[material][context]
    }

    /// Tallies (material, context) name pairs.
    pub fn accumulate<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        let mi = index_of(&self.materials);
        let ci = index_of(&self.contexts);
        let mut delta = vec![vec![0u64; self.contexts.len()]; self.materials.len()];
        for (m, c) in pairs {
            let m = *mi.get(m).ok_or_else(|| Error::UnknownLabel(m.to_string()))?;
            let c = *ci.get(c).ok_or_else(|| Error::UnknownLabel(c.to_string()))?;
            delta[m][c] += 1;
        }
        for (row, d) in self.counts.iter_mut().zip(delta) {
            for (x, y) in row.iter_mut().zip(d) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn add_index(&mut self, material: usize, context: usize, n: u64) -> Result<()> {
        if material >= self.materials.len() || context >= self.contexts.len() {
            return Err(Error::invalid(format!("cell ({material}, {context}) out of range")));
        }
        self.counts[material][context] += n;
        Ok(())
    }

    /// Adds the counts of a table over the same vocabularies.
    pub fn merge(&mut self, other: &CooccurrenceTable) -> Result<()> {
        if other.materials != self.materials || other.contexts != self.contexts {
            return Err(Error::invalid("tables have different vocabularies"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn column_total(&self, context: usize) -> u64 {
        self.counts.iter().map(|r| r[context]).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn context_index(&self, name: &str) -> Result<usize> {
        self.contexts
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::UnknownLabel(name.to_string()))
    }

    /// p(m | c) = (count(m, c) + α) / (total(c) + α·|M|).
    pub fn conditional(&self, context: usize, alpha: f64) -> Result<Vec<f64>> {
        if context >= self.contexts.len() {
            return Err(Error::invalid(format!("context index {context} out of range")));
        }
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::invalid(format!("smoothing {alpha} must be >= 0")));
        }
        let total = self.column_total(context) as f64;
        let denom = total + alpha * self.materials.len() as f64;
        if denom == 0.0 {
            return Err(Error::invalid(format!(
                "context `{}` has no counts and no smoothing",
                self.contexts[context]
            )));
        }
        Ok(self.counts.iter().map(|r| (r[context] as f64 + alpha) / denom).collect())
    }

    /// Marginal material distribution over all contexts.
    pub fn material_marginal(&self) -> Result<Vec<f64>> {
        let total = self.total() as f64;
        if total == 0.0 {
            return Err(Error::invalid("table is empty"));
        }
        Ok(self.counts.iter().map(|r| r.iter().sum::<u64>() as f64 / total).collect())
    }

    /// Merges context columns: `assignment[c]` names the new column of old
    /// column `c`.
    pub fn merge_columns(&self, names: Vec<String>, assignment: &[usize]) -> Result<CooccurrenceTable> {
        if assignment.len() != self.contexts.len() || assignment.iter().any(|&g| g >= names.len()) {
            return Err(Error::invalid("column assignment does not match the table"));
        }
        let mut out = CooccurrenceTable::new(self.materials.clone(), names);
        for (m, row) in self.counts.iter().enumerate() {
            for (c, &n) in row.iter().enumerate() {
                out.counts[m][assignment[c]] += n;
            }
        }
        Ok(out)
    }

    /// Distributions, entropies and their summaries over all contexts with
    /// at least one count (or every context when `alpha > 0`).
    pub fn report(&self, alpha: f64) -> Result<ConditionalReport> {
        let grand = self.total() as f64;
        let mut contexts = Vec::new();
        let mut expected = 0.0;
        for (c, name) in self.contexts.iter().enumerate() {
            let total = self.column_total(c);
            if total == 0 && alpha == 0.0 {
                continue;
            }
            let distribution = self.conditional(c, alpha)?;
            let h = entropy(&distribution);
            let weight = if grand > 0.0 { total as f64 / grand } else { 0.0 };
            expected += weight * h;
            contexts.push(ContextEntry {
                name: name.clone(),
                count: total,
                weight,
                distribution,
                entropy: h,
            });
        }
        let unweighted = if contexts.is_empty() {
            0.0
        } else {
            contexts.iter().map(|c| c.entropy).sum::<f64>() / contexts.len() as f64
        };
        Ok(ConditionalReport {
            materials: self.materials.clone(),
            marginal_entropy: self.material_marginal().map(|p| entropy(&p)).unwrap_or(0.0),
            expected_entropy: expected,
            unweighted_entropy: unweighted,
            uniform_entropy: (self.materials.len() as f64).ln(),
            contexts,
            smoothing: alpha,
        })
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["material".to_string()];
        header.extend(self.contexts.iter().cloned());
        w.write_record(&header)?;
        for (name, row) in self.materials.iter().zip(&self.counts) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(|n| n.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let contexts: Vec<String> = r.headers()?.iter().skip(1).map(str::to_string).collect();
        let mut materials = Vec::new();
        let mut counts = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let mut fields = rec.iter();
            let name = fields.next().unwrap_or_default().to_string();
            let row = fields
                .map(|f| {
                    f.trim()
                        .parse::<u64>()
                        .map_err(|_| Error::invalid(format!("count `{f}` for material `{name}` is not a nonnegative integer")))
                })
                .collect::<Result<Vec<u64>>>()?;
            materials.push(name);
            counts.push(row);
        }
        CooccurrenceTable::from_counts(materials, contexts, counts)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        crate::io::container::write_atomic(path, &buf)
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(f)
    }
}

/// Shannon entropy in nats with 0·ln 0 = 0.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextEntry {
    pub name: String,
    pub count: u64,
    /// Empirical p(c).
    pub weight: f64,
    pub distribution: Vec<f64>,
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalReport {
    pub materials: Vec<String>,
    pub contexts: Vec<ContextEntry>,
    /// H(M|C) weighted by the empirical context marginal.
    pub expected_entropy: f64,
    /// Plain mean of the per-context entropies.
    pub unweighted_entropy: f64,
    /// H(M).
    pub marginal_entropy: f64,
    /// ln |M|.
    pub uniform_entropy: f64,
    pub smoothing: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelEntropy {
    pub level: String,
    pub categories: usize,
    pub expected_entropy: f64,
    pub unweighted_entropy: f64,
}

/// Expected conditional entropy H(M | C_level) for every hierarchy level,
/// coarse to fine, merging leaf columns exactly. `marginal` overrides the
/// leaf weights (defaults to the column totals).
pub fn granularity_study(
    table: &CooccurrenceTable,
    hierarchy: &Hierarchy,
    marginal: Option<&[f64]>,
) -> Result<Vec<LevelEntropy>> {
    let leaf_of_column: Vec<usize> = table
        .contexts()
        .iter()
        .map(|c| hierarchy.leaf_index(c).ok_or_else(|| Error::UnknownLabel(c.clone())))
        .collect::<Result<_>>()?;
    if let Some(m) = marginal {
        if m.len() != table.contexts().len() {
            return Err(Error::shape("context marginal length differs from the table"));
        }
    }
    // Each finer level is the coarser one minus a per-group information gain.
    // The gains are Jensen gaps of the concave entropy, so clamping them at
    // zero only removes rounding noise and keeps the sequence monotone in
    // floating point as well.
    let mut out: Vec<LevelEntropy> = Vec::new();
    let mut previous: Option<(Vec<usize>, Vec<f64>, Vec<Option<f64>>)> = None;
    for level in hierarchy.levels() {
        let (names, leaf_group) = hierarchy.grouping(level)?;
        let assignment: Vec<usize> = leaf_of_column.iter().map(|&l| leaf_group[l]).collect();
        let merged = table.merge_columns(names.clone(), &assignment)?;
        let weights: Vec<f64> = match marginal {
            Some(m) => {
                let mut w = vec![0.0; names.len()];
                for (c, &g) in assignment.iter().enumerate() {
                    w[g] += m[c];
                }
                w
            }
            None => {
                let total = merged.total() as f64;
                (0..names.len()).map(|g| merged.column_total(g) as f64 / total).collect()
            }
        };
        let hs: Vec<Option<f64>> = (0..names.len())
            .map(|g| {
                if merged.column_total(g) == 0 {
                    Ok(None)
                } else {
                    Ok(Some(entropy(&merged.conditional(g, 0.0)?)))
                }
            })
            .collect::<Result<_>>()?;
        let present: Vec<f64> = hs.iter().flatten().copied().collect();
        let expected = match &previous {
            None => (0..names.len()).filter_map(|g| hs[g].map(|h| weights[g] * h)).sum(),
            Some((prev_leaf_group, prev_weights, prev_hs)) => {
                let mut parent = vec![usize::MAX; names.len()];
                for (leaf, &g) in leaf_group.iter().enumerate() {
                    parent[g] = prev_leaf_group[leaf];
                }
                let mut children_term = vec![0.0; prev_weights.len()];
                for g in 0..names.len() {
                    if let Some(h) = hs[g] {
                        children_term[parent[g]] += weights[g] * h;
                    }
                }
                let mut loss = 0.0;
                for (p, term) in children_term.iter().enumerate() {
                    if let Some(h) = prev_hs[p] {
                        loss += (prev_weights[p] * h - term).max(0.0);
                    }
                }
                let coarse = out.last().map_or(0.0, |l| l.expected_entropy);
                (coarse - loss).max(0.0)
            }
        };
        out.push(LevelEntropy {
            level: level.clone(),
            categories: names.len(),
            expected_entropy: expected,
            unweighted_entropy: if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 },
        });
        previous = Some((leaf_group, weights, hs));
    }
    Ok(out)
}
