//! Tabular datasets of `(features, sensitive attributes, binary label)`.
//!
//! Covers CSV ingestion and export, seeded train/validation/test splitting,
//! one-hot encoding of sensitive attributes, feature standardization and
//! inverse-frequency propensity weights.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensitiveAttribute {
    pub name: String,
    pub categories: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensitiveSchema {
    attributes: Vec<SensitiveAttribute>,
}

impl SensitiveSchema {
    pub fn new(attributes: Vec<SensitiveAttribute>) -> Result<Self> {
        for (i, a) in attributes.iter().enumerate() {
            if a.categories.is_empty() {
                return Err(Error::Data(format!("attribute `{}` has no categories", a.name)));
            }
            if attributes[..i].iter().any(|b| b.name == a.name) {
                return Err(Error::Data(format!("duplicate attribute name `{}`", a.name)));
            }
        }
        Ok(Self { attributes })
    }

    pub fn attributes(&self) -> &[SensitiveAttribute] {
        &self.attributes
    }

    /// Number of attributes, `J`.
    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    /// Length of the concatenated one-hot encoding.
    pub fn encoded_len(&self) -> usize {
        self.attributes.iter().map(|a| a.categories.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub x: Vec<f64>,
    /// Category index per sensitive attribute.
    pub s: Vec<usize>,
    pub y: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    feature_names: Vec<String>,
    label_name: String,
    schema: SensitiveSchema,
    records: Vec<Record>,
}

impl Dataset {
    pub fn new(
        feature_names: Vec<String>,
        label_name: impl Into<String>,
        schema: SensitiveSchema,
        records: Vec<Record>,
    ) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Data("dataset must contain at least one record".into()));
        }
        let m = feature_names.len();
        for (i, r) in records.iter().enumerate() {
            if r.x.len() != m {
                return Err(Error::Data(format!(
                    "record {i} has {} features, expected {m}",
                    r.x.len()
                )));
            }
            if r.s.len() != schema.len() {
                return Err(Error::Data(format!(
                    "record {i} has {} sensitive values, expected {}",
                    r.s.len(),
                    schema.len()
                )));
            }
            for (j, (&c, attr)) in r.s.iter().zip(schema.attributes()).enumerate() {
                if c >= attr.categories.len() {
                    return Err(Error::Data(format!(
                        "record {i}: category index {c} out of range for attribute {j} (`{}`)",
                        attr.name
                    )));
                }
            }
            if r.y > 1 {
                return Err(Error::Data(format!("record {i}: label {} is not binary", r.y)));
            }
        }
        Ok(Self {
            feature_names,
            label_name: label_name.into(),
            schema,
            records,
        })
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn label_name(&self) -> &str {
        &self.label_name
    }

    pub fn schema(&self) -> &SensitiveSchema {
        &self.schema
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Feature dimension `M`.
    pub fn num_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.records.iter().map(|r| r.y).collect()
    }

    /// Category index of attribute `j` for every record.
    pub fn groups(&self, j: usize) -> Vec<usize> {
        self.records.iter().map(|r| r.s[j]).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let records = indices.iter().map(|&i| self.records[i].clone()).collect();
        Self::new(
            self.feature_names.clone(),
            self.label_name.clone(),
            self.schema.clone(),
            records,
        )
    }

    fn with_records(&self, records: Vec<Record>) -> Self {
        Self {
            feature_names: self.feature_names.clone(),
            label_name: self.label_name.clone(),
            schema: self.schema.clone(),
            records,
        }
    }

    /// Dense model inputs.
    pub fn encode(&self) -> EncodedData {
        let m = self.num_features();
        let j = self.schema.encoded_len();
        let mut x = Vec::with_capacity(self.len() * m);
        let mut s = Vec::with_capacity(self.len() * j);
        for r in &self.records {
            x.extend_from_slice(&r.x);
            s.extend(encode_sensitive(&r.s, &self.schema).into_data());
        }
        EncodedData {
            x: Tensor::new(vec![self.len(), m], x).expect("sized"),
            s: Tensor::new(vec![self.len(), j], s).expect("sized"),
            y: self.records.iter().map(|r| f64::from(r.y)).collect(),
        }
    }
}

/// Features, one-hot sensitive attributes and labels as matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedData {
    pub x: Tensor,
    pub s: Tensor,
    pub y: Vec<f64>,
}

impl EncodedData {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Concatenated one-hot blocks, one per attribute.
pub fn encode_sensitive(s: &[usize], schema: &SensitiveSchema) -> Tensor {
    let mut out = vec![0.0; schema.encoded_len()];
    let mut offset = 0;
    for (&c, attr) in s.iter().zip(schema.attributes()) {
        out[offset + c] = 1.0;
        offset += attr.categories.len();
    }
    Tensor::vector(out)
}

// ---------------------------------------------------------------------------
// CSV

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnRoles {
    pub features: Vec<String>,
    pub sensitive: Vec<String>,
    pub label: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MissingPolicy {
    /// Any missing or non-numeric feature cell is an error.
    #[default]
    Strict,
    /// Missing or non-numeric cells are replaced by the column mean.
    MeanImpute,
}

fn is_missing(cell: &str) -> bool {
    matches!(cell, "" | "NA" | "NaN" | "nan" | "null")
}

/// Reads a dataset; row numbers in errors are file line numbers.
pub fn load_csv(path: &Path, roles: &ColumnRoles, missing: MissingPolicy) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = reader.headers()?.clone();
    let find = |name: &str| -> Result<usize> {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Csv {
            path: path.to_path_buf(),
            row: 1,
            column: name.to_string(),
            detail: "unknown column name".into(),
        })
    };
    let feature_cols = roles.features.iter().map(|f| find(f)).collect::<Result<Vec<_>>>()?;
    let sensitive_cols = roles.sensitive.iter().map(|f| find(f)).collect::<Result<Vec<_>>>()?;
    let label_col = find(&roles.label)?;

    let mut categories: Vec<Vec<String>> = vec![Vec::new(); sensitive_cols.len()];
    let mut lookup: Vec<HashMap<String, usize>> = vec![HashMap::new(); sensitive_cols.len()];
    let mut raw_x: Vec<Vec<Option<f64>>> = Vec::new();
    let mut s_rows = Vec::new();
    let mut labels = Vec::new();

    for (i, row) in reader.records().enumerate() {
        let row = row?;
        let line = i + 2;
        let cell_err = |column: &str, detail: String| Error::Csv {
            path: path.to_path_buf(),
            row: line,
            column: column.to_string(),
            detail,
        };

        let mut x = Vec::with_capacity(feature_cols.len());
        for (&c, name) in feature_cols.iter().zip(&roles.features) {
            let cell = row.get(c).unwrap_or("").trim();
            let parsed = if is_missing(cell) {
                None
            } else {
                cell.parse::<f64>().ok().filter(|v| v.is_finite())
            };
            if parsed.is_none() && missing == MissingPolicy::Strict {
                let detail = if is_missing(cell) {
                    "missing feature value".to_string()
                } else {
                    format!("non-numeric feature value `{cell}`")
                };
                return Err(cell_err(name, detail));
            }
            x.push(parsed);
        }

        let mut s = Vec::with_capacity(sensitive_cols.len());
        for (j, &c) in sensitive_cols.iter().enumerate() {
            let cell = row.get(c).unwrap_or("").trim().to_string();
            let next = categories[j].len();
            let idx = *lookup[j].entry(cell.clone()).or_insert_with(|| {
                categories[j].push(cell);
                next
            });
            s.push(idx);
        }

        let cell = row.get(label_col).unwrap_or("").trim();
        let y = match cell.parse::<f64>() {
            Ok(0.0) => 0,
            Ok(1.0) => 1,
            _ => return Err(cell_err(&roles.label, format!("label `{cell}` is not 0 or 1"))),
        };

        raw_x.push(x);
        s_rows.push(s);
        labels.push(y);
    }

    let mut means = vec![0.0; feature_cols.len()];
    if missing == MissingPolicy::MeanImpute {
        for (k, mean) in means.iter_mut().enumerate() {
            let present: Vec<f64> = raw_x.iter().filter_map(|r| r[k]).collect();
            if present.is_empty() && !raw_x.is_empty() {
                return Err(Error::Csv {
                    path: path.to_path_buf(),
                    row: 2,
                    column: roles.features[k].clone(),
                    detail: "every value is missing; nothing to impute from".into(),
                });
            }
            *mean = present.iter().sum::<f64>() / present.len().max(1) as f64;
        }
    }

    let records = raw_x
        .into_iter()
        .zip(s_rows)
        .zip(labels)
        .map(|((x, s), y)| Record {
            x: x.into_iter()
                .zip(&means)
                .map(|(v, &m)| v.unwrap_or(m))
                .collect(),
            s,
            y,
        })
        .collect();

    let schema = SensitiveSchema::new(
        roles
            .sensitive
            .iter()
            .zip(categories)
            .map(|(name, categories)| SensitiveAttribute {
                name: name.clone(),
                categories,
            })
            .collect(),
    )
    .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Dataset::new(roles.features.clone(), roles.label.clone(), schema, records)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

impl Dataset {
    pub fn column_roles(&self) -> ColumnRoles {
        ColumnRoles {
            features: self.feature_names.clone(),
            sensitive: self.schema.attributes().iter().map(|a| a.name.clone()).collect(),
            label: self.label_name.clone(),
        }
    }
}

/// Writes the header `features..., sensitive..., label` then one row per
/// record. Sensitive values are written as category names.
pub fn write_csv<W: Write>(
    writer: W,
    feature_names: &[String],
    schema: &SensitiveSchema,
    label_name: &str,
    records: &[Record],
) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Data("refusing to write an empty dataset".into()));
    }
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = feature_names.iter().map(String::as_str).collect();
    header.extend(schema.attributes().iter().map(|a| a.name.as_str()));
    header.push(label_name);
    w.write_record(&header)?;
    for r in records {
        let mut row: Vec<String> = r.x.iter().map(|v| v.to_string()).collect();
        row.extend(
            r.s.iter()
                .zip(schema.attributes())
                .map(|(&c, a)| a.categories[c].clone()),
        );
        row.push(r.y.to_string());
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

pub fn save_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(
        std::io::BufWriter::new(file),
        &dataset.feature_names,
        &dataset.schema,
        &dataset.label_name,
        &dataset.records,
    )
}

// ---------------------------------------------------------------------------
// Splitting

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.7,
            validation: 0.2,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let all = [self.train, self.validation, self.test];
        if all.iter().any(|&r| r.is_nan() || r <= 0.0 || !r.is_finite()) {
            return Err(Error::Config(format!("split ratios must be positive, got {all:?}")));
        }
        let total: f64 = all.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split ratios sum to {total}, expected 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitIndices {
    /// SHA-256 of the three index lists, for checking that runs share a split.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for part in [&self.train, &self.validation, &self.test] {
            for &i in part.iter() {
                h.update((i as u64).to_le_bytes());
            }
            h.update(u64::MAX.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Seeded permutation cut at `round(n * cumulative ratio)`.
pub fn split_indices(n: usize, ratios: &SplitRatios, seed: u64) -> Result<SplitIndices> {
    ratios.validate()?;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let cut1 = ((n as f64) * ratios.train).round() as usize;
    let cut2 = ((n as f64) * (ratios.train + ratios.validation)).round() as usize;
    let cut2 = cut2.min(n);
    let cut1 = cut1.min(cut2);
    let out = SplitIndices {
        train: order[..cut1].to_vec(),
        validation: order[cut1..cut2].to_vec(),
        test: order[cut2..].to_vec(),
    };
    for (name, part) in [
        ("train", &out.train),
        ("validation", &out.validation),
        ("test", &out.test),
    ] {
        if part.is_empty() {
            return Err(Error::Data(format!("{name} split of {n} records is empty")));
        }
    }
    Ok(out)
}

pub fn split(
    dataset: &Dataset,
    ratios: &SplitRatios,
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    let idx = split_indices(dataset.len(), ratios, seed)?;
    Ok((
        dataset.subset(&idx.train)?,
        dataset.subset(&idx.validation)?,
        dataset.subset(&idx.test)?,
    ))
}

// ---------------------------------------------------------------------------
// Propensity weights

/// Per attribute, per category: share of training records, or `None` when
/// the category does not occur.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyTable {
    freqs: Vec<Vec<Option<f64>>>,
}

impl FrequencyTable {
    pub fn get(&self, attribute: usize, category: usize) -> Option<f64> {
        self.freqs.get(attribute)?.get(category).copied().flatten()
    }

    pub fn attribute(&self, attribute: usize) -> &[Option<f64>] {
        &self.freqs[attribute]
    }
}

pub fn attribute_frequencies(train: &Dataset) -> FrequencyTable {
    let n = train.len() as f64;
    let freqs = train
        .schema()
        .attributes()
        .iter()
        .enumerate()
        .map(|(j, attr)| {
            let mut counts = vec![0usize; attr.categories.len()];
            for r in train.records() {
                counts[r.s[j]] += 1;
            }
            counts
                .into_iter()
                .map(|c| (c > 0).then(|| c as f64 / n))
                .collect()
        })
        .collect();
    FrequencyTable { freqs }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropensityWeights {
    values: Vec<f64>,
    normalized: bool,
}

impl PropensityWeights {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            values: vec![1.0; n],
            normalized: true,
        }
    }

    /// Multiplies every weight by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            values: self.values.iter().map(|w| w * factor).collect(),
            normalized: false,
        }
    }
}

/// `ω = 1 / Π_j freq(s_j)`, optionally divided by the mean weight.
pub fn propensity_weights(
    freq: &FrequencyTable,
    schema: &SensitiveSchema,
    records: &[Record],
    normalize: bool,
) -> Result<PropensityWeights> {
    let mut values = Vec::with_capacity(records.len());
    for r in records {
        let mut denom = 1.0;
        for (j, &c) in r.s.iter().enumerate() {
            let f = freq.get(j, c).ok_or_else(|| {
                let attr = &schema.attributes()[j];
                Error::UnseenCategory {
                    attribute: attr.name.clone(),
                    category: attr.categories.get(c).cloned().unwrap_or_else(|| c.to_string()),
                }
            })?;
            denom *= f;
        }
        values.push(1.0 / denom);
    }
    if normalize && !values.is_empty() {
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        for v in &mut values {
            *v /= mean;
        }
    }
    Ok(PropensityWeights { values, normalized: normalize })
}

// ---------------------------------------------------------------------------
// Standardization

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Population mean and standard deviation per feature.
    pub fn fit(train: &Dataset) -> Self {
        let m = train.num_features();
        let n = train.len() as f64;
        let mut mean = vec![0.0; m];
        let mut std = vec![0.0; m];
        for k in 0..m {
            let col = train.records().iter().map(|r| r.x[k]);
            let first = train.records()[0].x[k];
            if col.clone().all(|v| v == first) {
                mean[k] = first;
                continue;
            }
            let mu = col.clone().sum::<f64>() / n;
            let var = col.map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            mean[k] = mu;
            std[k] = var.sqrt();
        }
        Self { mean, std }
    }

    pub fn apply(&self, dataset: &Dataset) -> Result<Dataset> {
        if dataset.num_features() != self.mean.len() {
            return Err(Error::shape(
                "standardize",
                &[self.mean.len()],
                &[dataset.num_features()],
            ));
        }
        let records = dataset
            .records()
            .iter()
            .map(|r| Record {
                x: r.x
                    .iter()
                    .zip(self.mean.iter().zip(&self.std))
                    .map(|(&v, (&mu, &sd))| (v - mu) / sd.max(1e-8))
                    .collect(),
                s: r.s.clone(),
                y: r.y,
            })
            .collect();
        Ok(dataset.with_records(records))
    }
}

/// Fits on `train` and applies the same statistics to every dataset.
pub fn standardize(
    train: &Dataset,
    others: &[&Dataset],
) -> Result<(Dataset, Vec<Dataset>, Standardizer)> {
    let st = Standardizer::fit(train);
    let train = st.apply(train)?;
    let others = others.iter().map(|d| st.apply(d)).collect::<Result<Vec<_>>>()?;
    Ok((train, others, st))
}

// ---------------------------------------------------------------------------
// Reuse of a fitted pipeline on new data

impl Dataset {
    /// Re-indexes sensitive categories into `schema`'s order by name.
    /// Attribute names must match; an unknown category is an error.
    pub fn align_to(&self, schema: &SensitiveSchema) -> Result<Dataset> {
        if self.schema.len() != schema.len() {
            return Err(Error::Data(format!(
                "dataset has {} sensitive attributes, expected {}",
                self.schema.len(),
                schema.len()
            )));
        }
        for (mine, target) in self.schema.attributes().iter().zip(schema.attributes()) {
            if mine.name != target.name {
                return Err(Error::Data(format!(
                    "sensitive attribute `{}` does not match expected `{}`",
                    mine.name, target.name
                )));
            }
        }
        let maps: Vec<Vec<Option<usize>>> = self
            .schema
            .attributes()
            .iter()
            .zip(schema.attributes())
            .map(|(mine, target)| {
                mine.categories
                    .iter()
                    .map(|c| target.categories.iter().position(|t| t == c))
                    .collect()
            })
            .collect();
        let mut records = Vec::with_capacity(self.records.len());
        for r in &self.records {
            let mut s = Vec::with_capacity(r.s.len());
            for (j, &c) in r.s.iter().enumerate() {
                let idx = maps[j][c].ok_or_else(|| Error::UnseenCategory {
                    attribute: schema.attributes()[j].name.clone(),
                    category: self.schema.attributes()[j].categories[c].clone(),
                })?;
                s.push(idx);
            }
            records.push(Record { x: r.x.clone(), s, y: r.y });
        }
        Dataset::new(self.feature_names.clone(), self.label_name.clone(), schema.clone(), records)
    }
}

/// What a trained model needs to consume raw data again.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataContext {
    pub roles: ColumnRoles,
    pub schema: SensitiveSchema,
    pub standardizer: Standardizer,
}

impl DataContext {
    /// Aligns categories with the training schema and standardizes features.
    pub fn prepare(&self, raw: &Dataset) -> Result<Dataset> {
        if raw.feature_names() != self.roles.features.as_slice() {
            return Err(Error::Data("feature columns differ from the training data".into()));
        }
        self.standardizer.apply(&raw.align_to(&self.schema)?)
    }

    pub fn load_csv(&self, path: &Path, missing: MissingPolicy) -> Result<Dataset> {
        self.prepare(&load_csv(path, &self.roles, missing)?)
    }
}
