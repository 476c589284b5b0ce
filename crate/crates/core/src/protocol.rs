//! Task schedules, detection records and annotation filtering.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ClassId = u32;

/// One task: a single domain and the classes supervised in it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub index: u32,
    pub domain: String,
    pub classes: Vec<ClassId>,
}

/// Ordered tasks plus the classes that are never supervised.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSchedule {
    pub tasks: Vec<TaskSpec>,
    pub withheld: Vec<ClassId>,
    pub class_names: BTreeMap<ClassId, String>,
}

/// Name-based description used to build a schedule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub tasks: Vec<TaskConfig>,
    #[serde(default)]
    pub withheld: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub domain: String,
    pub classes: Vec<String>,
}

/// Builds a schedule from class names. Ids are assigned from 1 in order of
/// appearance, knowns first, withheld classes last.
pub fn build_schedule(config: &ScheduleConfig) -> Result<TaskSchedule> {
    let mut ids: BTreeMap<&str, ClassId> = BTreeMap::new();
    let mut owner: BTreeMap<&str, usize> = BTreeMap::new();
    let mut class_names = BTreeMap::new();
    let mut tasks = Vec::with_capacity(config.tasks.len());
    let mut next: ClassId = 1;

    for (k, task) in config.tasks.iter().enumerate() {
        let mut classes = Vec::with_capacity(task.classes.len());
        for name in &task.classes {
            if let Some(&prev) = owner.get(name.as_str()) {
                return Err(Error::Schedule(if prev == k {
                    format!("class `{name}` listed twice in task {}", k + 1)
                } else {
                    format!("class `{name}` appears in task {} and task {}", prev + 1, k + 1)
                }));
            }
            owner.insert(name, k);
            ids.insert(name, next);
            class_names.insert(next, name.clone());
            classes.push(next);
            next += 1;
        }
        tasks.push(TaskSpec {
            index: k as u32 + 1,
            domain: task.domain.clone(),
            classes,
        });
    }

    let mut withheld = Vec::with_capacity(config.withheld.len());
    for name in &config.withheld {
        if let Some(&k) = owner.get(name.as_str()) {
            return Err(Error::Schedule(format!(
                "withheld class `{name}` is also known in task {}",
                k + 1
            )));
        }
        if ids.contains_key(name.as_str()) {
            return Err(Error::Schedule(format!("withheld class `{name}` listed twice")));
        }
        ids.insert(name, next);
        class_names.insert(next, name.clone());
        withheld.push(next);
        next += 1;
    }

    let schedule = TaskSchedule {
        tasks,
        withheld,
        class_names,
    };
    schedule.validate()?;
    Ok(schedule)
}

impl TaskSchedule {
    /// Checks task numbering, class disjointness, withheld/known overlap and
    /// that every id is named.
    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Schedule("schedule has no tasks".into()));
        }
        let mut seen: BTreeMap<ClassId, u32> = BTreeMap::new();
        let mut domains: BTreeMap<&str, u32> = BTreeMap::new();
        for (k, task) in self.tasks.iter().enumerate() {
            if task.index != k as u32 + 1 {
                return Err(Error::Schedule(format!(
                    "task at position {} has index {}, expected {}",
                    k + 1,
                    task.index,
                    k + 1
                )));
            }
            if task.classes.is_empty() {
                return Err(Error::Schedule(format!("task {} has no classes", task.index)));
            }
            if task.domain.is_empty() || task.domain.contains(',') {
                return Err(Error::Schedule(format!(
                    "task {} must name exactly one domain, got `{}`",
                    task.index, task.domain
                )));
            }
            if let Some(prev) = domains.insert(&task.domain, task.index) {
                return Err(Error::Schedule(format!(
                    "domain `{}` used by task {prev} and task {}",
                    task.domain, task.index
                )));
            }
            for &c in &task.classes {
                if let Some(prev) = seen.insert(c, task.index) {
                    return Err(Error::Schedule(if prev == task.index {
                        format!("class {} listed twice in task {prev}", self.describe(c))
                    } else {
                        format!(
                            "class {} appears in task {prev} and task {}",
                            self.describe(c),
                            task.index
                        )
                    }));
                }
            }
        }
        let mut withheld = BTreeSet::new();
        for &c in &self.withheld {
            if let Some(t) = seen.get(&c) {
                return Err(Error::Schedule(format!(
                    "withheld class {} is also known in task {t}",
                    self.describe(c)
                )));
            }
            if !withheld.insert(c) {
                return Err(Error::Schedule(format!("withheld class {} listed twice", self.describe(c))));
            }
        }
        for c in seen.keys().chain(withheld.iter()) {
            if *c == 0 {
                return Err(Error::Schedule("class id 0 is reserved".into()));
            }
            if !self.class_names.contains_key(c) {
                return Err(Error::Schedule(format!("class id {c} has no name")));
            }
        }
        Ok(())
    }

    fn describe(&self, c: ClassId) -> String {
        match self.class_names.get(&c) {
            Some(n) => format!("`{n}` ({c})"),
            None => c.to_string(),
        }
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Task `t`, 1-based.
    pub fn task(&self, t: usize) -> Result<&TaskSpec> {
        if t == 0 || t > self.tasks.len() {
            return Err(Error::Schedule(format!(
                "task {t} out of range 1..={}",
                self.tasks.len()
            )));
        }
        Ok(&self.tasks[t - 1])
    }

    /// Sentinel id for unknown objects: one past the largest named class.
    pub fn unknown_id(&self) -> ClassId {
        self.class_names.keys().next_back().copied().unwrap_or(0) + 1
    }

    /// All known classes in introduction order.
    pub fn all_known(&self) -> Vec<ClassId> {
        self.tasks.iter().flat_map(|t| t.classes.iter().copied()).collect()
    }

    /// Task that introduces class `c`, if any.
    pub fn task_of(&self, c: ClassId) -> Option<u32> {
        self.tasks.iter().find(|t| t.classes.contains(&c)).map(|t| t.index)
    }

    pub fn class_name(&self, c: ClassId) -> Option<&str> {
        if c == self.unknown_id() {
            return Some("unknown");
        }
        self.class_names.get(&c).map(String::as_str)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: TaskSchedule = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = self.to_json()?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// A ground-truth annotation or a scored prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: u64,
    pub domain: String,
    /// `[x, y, w, h]`.
    pub bbox: [f64; 4],
    pub category_id: ClassId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl DetectionRecord {
    pub fn validate(&self) -> Result<()> {
        if self.bbox.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("bbox of image {}", self.image_id)));
        }
        if self.bbox[2] <= 0.0 || self.bbox[3] <= 0.0 {
            return Err(Error::Format(format!(
                "image {}: box width and height must be positive",
                self.image_id
            )));
        }
        if let Some(s) = self.score {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::Format(format!("image {}: score {s} outside [0, 1]", self.image_id)));
            }
        }
        Ok(())
    }
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<DetectionRecord>> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DetectionRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
        rec.validate()
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl(path: impl AsRef<Path>, records: &[DetectionRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for rec in records {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Keeps only annotations of classes supervised in task `t`.
pub fn filter_annotations(records: &[DetectionRecord], schedule: &TaskSchedule, t: usize) -> Result<Vec<DetectionRecord>> {
    let task = schedule.task(t)?;
    Ok(records
        .iter()
        .filter(|r| task.classes.contains(&r.category_id))
        .cloned()
        .collect())
}

/// Label space and domains evaluated after task `t`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalSet {
    pub known: BTreeSet<ClassId>,
    pub unknown_id: ClassId,
    /// Seen domains in task order.
    pub domains: Vec<String>,
}

impl EvalSet {
    /// Known classes plus the unknown sentinel.
    pub fn classes(&self) -> BTreeSet<ClassId> {
        let mut c = self.known.clone();
        c.insert(self.unknown_id);
        c
    }

    /// Drops records from unseen domains and relabels every class that is
    /// not yet known as unknown.
    pub fn transform_gt(&self, records: &[DetectionRecord]) -> Vec<DetectionRecord> {
        records
            .iter()
            .filter(|r| self.domains.contains(&r.domain))
            .map(|r| {
                let mut r = r.clone();
                if !self.known.contains(&r.category_id) {
                    r.category_id = self.unknown_id;
                }
                r
            })
            .collect()
    }
}

pub fn cumulative_eval_set(schedule: &TaskSchedule, t: usize) -> Result<EvalSet> {
    schedule.task(t)?;
    let seen = &schedule.tasks[..t];
    Ok(EvalSet {
        known: seen.iter().flat_map(|k| k.classes.iter().copied()).collect(),
        unknown_id: schedule.unknown_id(),
        domains: seen.iter().map(|k| k.domain.clone()).collect(),
    })
}
