//! Dataset ingestion, instance rendering and partition sampling.
//!
//! An instance is rendered into the exact text whose presence in pre-training
//! data (paired with its label) would count as contamination: classification
//! instances carry their text and label, NLI instances both sentences and the
//! label, summarization instances only the summary.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::seeding::{derive_seed, STREAM_SAMPLING};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("instance {instance}: source field {column:?} for role {role} is missing")]
    MissingField {
        instance: String,
        role: Role,
        column: String,
    },
    #[error("instance {instance}: label {label} is not in label_names")]
    UnknownLabel { instance: String, label: String },
    #[error("cannot sample {requested} instances from a partition of {available}")]
    SampleTooLarge { requested: usize, available: usize },
    #[error("sample size must be positive")]
    EmptySample,
    #[error("duplicate instance_id {0} in partition")]
    DuplicateInstance(String),
    #[error("invalid dataset config: {0}")]
    Config(String),
    #[error("rendered text for instance {0} is empty")]
    EmptyRendering(String),
    #[error("{path}: {message}")]
    Read { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskFamily {
    Classification,
    Nli,
    Summarization,
}

/// Template roles a source column can be mapped onto.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Text,
    Label,
    Premise,
    Hypothesis,
    Summary,
}

impl Role {
    pub const ALL: [Role; 5] = [Role::Text, Role::Label, Role::Premise, Role::Hypothesis, Role::Summary];

    pub fn name(self) -> &'static str {
        match self {
            Role::Text => "text",
            Role::Label => "label",
            Role::Premise => "premise",
            Role::Hypothesis => "hypothesis",
            Role::Summary => "summary",
        }
    }

    fn from_name(name: &str) -> Option<Role> {
        Role::ALL.into_iter().find(|r| r.name() == name)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl TaskFamily {
    pub fn required_roles(self) -> &'static [Role] {
        match self {
            TaskFamily::Classification => &[Role::Text, Role::Label],
            TaskFamily::Nli => &[Role::Premise, Role::Hypothesis, Role::Label],
            TaskFamily::Summarization => &[Role::Summary],
        }
    }

    pub fn default_template(self) -> &'static str {
        match self {
            TaskFamily::Classification => "Text: {{text}}\nLabel: {{label}}",
            TaskFamily::Nli => "Sentence 1: {{premise}}\nSentence 2: {{hypothesis}}\nLabel: {{label}}",
            TaskFamily::Summarization => "{{summary}}",
        }
    }
}

/// How one dataset partition is read and rendered.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub dataset_name: String,
    pub split_name: String,
    pub task: TaskFamily,
    /// Template role -> source column.
    pub field_map: BTreeMap<Role, String>,
    /// Integer label (as a string key) -> display name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_names: Option<BTreeMap<String, String>>,
    /// Double-brace placeholders such as `{{text}}`; defaults per task family.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub render_template: Option<String>,
    /// Column holding a stable id; row indices are used otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id_field: Option<String>,
}

/// A parsed render template: literal runs and role placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Literal(String),
    Role(Role),
}

fn parse_template(template: &str) -> Result<Vec<Piece>, CorpusError> {
    let mut pieces = Vec::new();
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        if start > 0 {
            pieces.push(Piece::Literal(rest[..start].to_string()));
        }
        let after = &rest[start + 2..];
        let end = after
            .find("}}")
            .ok_or_else(|| CorpusError::Config(format!("unclosed placeholder in template {template:?}")))?;
        let name = after[..end].trim();
        let role =
            Role::from_name(name).ok_or_else(|| CorpusError::Config(format!("unknown placeholder {{{{{name}}}}}")))?;
        pieces.push(Piece::Role(role));
        rest = &after[end + 2..];
    }
    if !rest.is_empty() {
        pieces.push(Piece::Literal(rest.to_string()));
    }
    Ok(pieces)
}

impl DatasetConfig {
    pub fn template(&self) -> &str {
        self.render_template
            .as_deref()
            .unwrap_or_else(|| self.task.default_template())
    }

    /// Checks that every placeholder is mapped and every required role is rendered.
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.dataset_name.trim().is_empty() || self.split_name.trim().is_empty() {
            return Err(CorpusError::Config(
                "dataset_name and split_name must be non-empty".into(),
            ));
        }
        let pieces = parse_template(self.template())?;
        let used: BTreeSet<Role> = pieces
            .iter()
            .filter_map(|p| match p {
                Piece::Role(r) => Some(*r),
                Piece::Literal(_) => None,
            })
            .collect();
        for role in &used {
            if !self.field_map.contains_key(role) {
                return Err(CorpusError::Config(format!(
                    "placeholder {{{{{role}}}}} has no entry in field_map"
                )));
            }
        }
        for role in self.task.required_roles() {
            if !self.field_map.contains_key(role) {
                return Err(CorpusError::Config(format!("field_map lacks required role {role}")));
            }
            if !used.contains(role) {
                return Err(CorpusError::Config(format!(
                    "render_template never uses {{{{{role}}}}}"
                )));
            }
        }
        if let Some(names) = &self.label_names {
            for key in names.keys() {
                key.trim()
                    .parse::<i64>()
                    .map_err(|_| CorpusError::Config(format!("label_names key {key:?} is not an integer")))?;
            }
        }
        Ok(())
    }
}

/// Instance identifier. Orders numerically when both ids are integers.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InstanceId(pub String);

impl InstanceId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl From<&str> for InstanceId {
    fn from(s: &str) -> Self {
        InstanceId(s.to_string())
    }
}

impl From<String> for InstanceId {
    fn from(s: String) -> Self {
        InstanceId(s)
    }
}

impl fmt::Display for InstanceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl Ord for InstanceId {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self.0.parse::<u64>(), other.0.parse::<u64>()) {
            (Ok(a), Ok(b)) => a.cmp(&b).then_with(|| self.0.cmp(&other.0)),
            (Ok(_), Err(_)) => Ordering::Less,
            (Err(_), Ok(_)) => Ordering::Greater,
            (Err(_), Err(_)) => self.0.cmp(&other.0),
        }
    }
}

impl PartialOrd for InstanceId {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInstance {
    pub instance_id: InstanceId,
    pub dataset: String,
    pub split: String,
    pub rendered_text: String,
    /// Raw source row; kept in memory only.
    #[serde(skip)]
    pub source_fields: Map<String, Value>,
}

/// Hex SHA-256 over the canonical JSON of the raw fields (first 16 chars).
pub fn fields_hash(fields: &Map<String, Value>) -> String {
    let canonical = serde_json::to_string(fields).expect("json map serializes");
    hex::encode(Sha256::digest(canonical.as_bytes()))[..16].to_string()
}

fn value_as_text(value: &Value) -> String {
    match value {
        Value::String(s) => s.clone(),
        Value::Null => String::new(),
        other => other.to_string(),
    }
}

fn render_label(config: &DatasetConfig, instance: &str, value: &Value) -> Result<String, CorpusError> {
    let raw = value_as_text(value).trim().to_string();
    let Some(names) = &config.label_names else {
        return Ok(raw);
    };
    let unknown = || CorpusError::UnknownLabel {
        instance: instance.to_string(),
        label: raw.clone(),
    };
    let id: i64 = match value {
        Value::Number(n) => n.as_i64().ok_or_else(unknown)?,
        _ => raw.parse().map_err(|_| unknown())?,
    };
    let name = names
        .iter()
        .find(|(k, _)| k.trim().parse::<i64>().ok() == Some(id))
        .map(|(_, v)| v)
        .ok_or_else(unknown)?;
    Ok(format!("{id} ({name})"))
}

/// Renders one source row. `row_index` becomes the instance id unless
/// `id_field` is configured; without either, a hash of the raw fields is used.
pub fn render_instance(
    config: &DatasetConfig,
    source_fields: &Map<String, Value>,
    row_index: Option<usize>,
) -> Result<DatasetInstance, CorpusError> {
    let instance_id = match (&config.id_field, row_index) {
        (Some(col), _) if source_fields.contains_key(col) => value_as_text(&source_fields[col]),
        (_, Some(idx)) => idx.to_string(),
        _ => fields_hash(source_fields),
    };
    let pieces = parse_template(config.template())?;
    let mut rendered = String::new();
    for piece in &pieces {
        match piece {
            Piece::Literal(s) => rendered.push_str(s),
            Piece::Role(role) => {
                let column = config.field_map.get(role).ok_or_else(|| {
                    CorpusError::Config(format!("placeholder {{{{{role}}}}} has no entry in field_map"))
                })?;
                let value = source_fields.get(column).ok_or_else(|| CorpusError::MissingField {
                    instance: instance_id.clone(),
                    role: *role,
                    column: column.clone(),
                })?;
                let text = match role {
                    Role::Label => render_label(config, &instance_id, value)?,
                    _ => value_as_text(value).trim().to_string(),
                };
                rendered.push_str(&text);
            }
        }
    }
    if rendered.trim().is_empty() {
        return Err(CorpusError::EmptyRendering(instance_id));
    }
    Ok(DatasetInstance {
        instance_id: InstanceId(instance_id),
        dataset: config.dataset_name.clone(),
        split: config.split_name.clone(),
        rendered_text: rendered,
        source_fields: source_fields.clone(),
    })
}

/// Draws `n` instances uniformly without replacement and returns them in ascending id order.
pub fn sample_partition(
    instances: &[DatasetInstance],
    n: usize,
    seed: u64,
) -> Result<Vec<DatasetInstance>, CorpusError> {
    if n == 0 {
        return Err(CorpusError::EmptySample);
    }
    if n > instances.len() {
        return Err(CorpusError::SampleTooLarge {
            requested: n,
            available: instances.len(),
        });
    }
    let mut seen = BTreeSet::new();
    for inst in instances {
        if !seen.insert(&inst.instance_id) {
            return Err(CorpusError::DuplicateInstance(inst.instance_id.to_string()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_SAMPLING, &[]));
    let mut picked: Vec<DatasetInstance> = index::sample(&mut rng, instances.len(), n)
        .into_iter()
        .map(|i| instances[i].clone())
        .collect();
    picked.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
    Ok(picked)
}

fn read_err(path: &Path, message: impl fmt::Display) -> CorpusError {
    CorpusError::Read {
        path: path.display().to_string(),
        message: message.to_string(),
    }
}

/// Reads raw rows from a `.jsonl` or `.csv` file (by extension).
pub fn read_rows(path: &Path) -> Result<Vec<Map<String, Value>>, CorpusError> {
    let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        let mut reader = csv::Reader::from_path(path).map_err(|e| read_err(path, e))?;
        let headers = reader.headers().map_err(|e| read_err(path, e))?.clone();
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| read_err(path, e))?;
            let row = headers
                .iter()
                .zip(record.iter())
                .map(|(h, v)| (h.to_string(), Value::String(v.to_string())))
                .collect();
            rows.push(row);
        }
        Ok(rows)
    } else {
        let raw = std::fs::read_to_string(path).map_err(|e| read_err(path, e))?;
        raw.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, line)| match serde_json::from_str::<Value>(line) {
                Ok(Value::Object(map)) => Ok(map),
                Ok(_) => Err(read_err(path, format!("line {}: expected a JSON object", i + 1))),
                Err(e) => Err(read_err(path, format!("line {}: {e}", i + 1))),
            })
            .collect()
    }
}

/// Reads and renders a whole partition.
pub fn load_partition(config: &DatasetConfig, path: &Path) -> Result<Vec<DatasetInstance>, CorpusError> {
    config.validate()?;
    read_rows(path)?
        .iter()
        .enumerate()
        .map(|(i, row)| render_instance(config, row, Some(i)))
        .collect()
}
