//! Interaction logs: ingestion, sparsity filtering and the temporal split.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::{Read, Write};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::{KcId, QuestionId, StudentId};

/// Minimum interactions per student and answers per question kept by
/// [`ingest`].
pub const MIN_RECORDS: usize = 10;

pub const COLUMNS: [&str; 5] = ["student_id", "question_id", "kc_ids", "correct", "timestamp"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub student: StudentId,
    pub question: QuestionId,
    pub kcs: BTreeSet<KcId>,
    pub correct: bool,
    /// Epoch milliseconds.
    pub timestamp: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    pub rows_read: u64,
    pub dropped_missing: u64,
    pub dropped_duplicate: u64,
    pub removed_students: u64,
    pub removed_questions: u64,
    pub filter_passes: u32,
}

/// Filtered interactions sorted by student then timestamp, with a split label
/// per interaction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    interactions: Vec<Interaction>,
    splits: Vec<Split>,
}

impl Dataset {
    /// Builds a dataset from already-clean interactions: sorts them and labels
    /// everything `Train` until [`split`] is applied.
    pub fn from_interactions(mut interactions: Vec<Interaction>) -> Result<Self> {
        if interactions.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if let Some(i) = interactions.iter().position(|x| x.kcs.is_empty()) {
            return Err(Error::Ingest {
                row: i as u64 + 1,
                message: "interaction without knowledge concepts".into(),
            });
        }
        sort_canonical(&mut interactions);
        let splits = vec![Split::Train; interactions.len()];
        Ok(Self { interactions, splits })
    }

    pub fn interactions(&self) -> &[Interaction] {
        &self.interactions
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    pub fn labelled(&self) -> impl Iterator<Item = (&Interaction, Split)> + '_ {
        self.interactions.iter().zip(self.splits.iter().copied())
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &Interaction> + '_ {
        self.labelled()
            .filter(move |(_, s)| *s == split)
            .map(|(x, _)| x)
    }

    pub fn train(&self) -> impl Iterator<Item = &Interaction> + '_ {
        self.in_split(Split::Train)
    }

    /// Contiguous index range of each student's sequence.
    pub fn student_ranges(&self) -> BTreeMap<StudentId, Range<usize>> {
        let mut out = BTreeMap::new();
        let mut start = 0;
        for i in 1..=self.interactions.len() {
            if i == self.interactions.len()
                || self.interactions[i].student != self.interactions[start].student
            {
                out.insert(self.interactions[start].student.clone(), start..i);
                start = i;
            }
        }
        out
    }

    pub fn students(&self) -> BTreeSet<StudentId> {
        self.interactions.iter().map(|x| x.student.clone()).collect()
    }

    pub fn questions(&self) -> BTreeSet<QuestionId> {
        self.interactions.iter().map(|x| x.question.clone()).collect()
    }

    /// KC set per question, unioned over every row mentioning the question.
    pub fn question_kcs(&self) -> BTreeMap<QuestionId, BTreeSet<KcId>> {
        let mut out: BTreeMap<QuestionId, BTreeSet<KcId>> = BTreeMap::new();
        for x in &self.interactions {
            out.entry(x.question.clone())
                .or_default()
                .extend(x.kcs.iter().cloned());
        }
        out
    }

    /// Writes the dataset back out in the ingest format.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(COLUMNS).map_err(csv_io)?;
        for x in &self.interactions {
            let kcs = x.kcs.iter().map(KcId::as_str).collect::<Vec<_>>().join(";");
            w.write_record([
                x.student.as_str(),
                x.question.as_str(),
                &kcs,
                if x.correct { "1" } else { "0" },
                &x.timestamp.to_string(),
            ])
            .map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let d: Dataset = serde_json::from_str(s)?;
        if d.splits.len() != d.interactions.len() {
            return Err(Error::Config("split labels do not match interactions".into()));
        }
        Ok(d)
    }
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn sort_canonical(xs: &mut [Interaction]) {
    xs.sort_by(|a, b| {
        (&a.student, a.timestamp, &a.question).cmp(&(&b.student, b.timestamp, &b.question))
    });
}

/// Reads a delimiter-separated log, drops incomplete and duplicate rows, and
/// filters students and questions with fewer than [`MIN_RECORDS`] records
/// until no further removal happens.
pub fn ingest<R: Read>(source: R) -> Result<(Dataset, IngestStats)> {
    ingest_with(source, b',', MIN_RECORDS)
}

pub fn ingest_with<R: Read>(
    source: R,
    delimiter: u8,
    min_records: usize,
) -> Result<(Dataset, IngestStats)> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(source);

    let headers = reader.headers().map_err(|e| Error::Ingest {
        row: 1,
        message: format!("unreadable header: {e}"),
    })?;
    let mut column = [0usize; 5];
    for (slot, name) in column.iter_mut().zip(COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Ingest {
                row: 1,
                message: format!("missing column `{name}`"),
            })?;
    }

    let mut stats = IngestStats::default();
    let mut seen = HashSet::new();
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i as u64 + 2;
        let record = record.map_err(|e| Error::Ingest {
            row,
            message: e.to_string(),
        })?;
        stats.rows_read += 1;
        let field = |c: usize| record.get(column[c]).filter(|v| !v.is_empty());
        let (Some(student), Some(question), Some(kc_field), Some(correct), Some(ts)) =
            (field(0), field(1), field(2), field(3), field(4))
        else {
            stats.dropped_missing += 1;
            continue;
        };
        let kcs: BTreeSet<KcId> = kc_field
            .split(';')
            .map(str::trim)
            .filter(|k| !k.is_empty())
            .map(KcId::from)
            .collect();
        if kcs.is_empty() {
            stats.dropped_missing += 1;
            continue;
        }
        let correct = match correct {
            "1" => true,
            "0" => false,
            other => {
                return Err(Error::Ingest {
                    row,
                    message: format!("`correct` must be 0 or 1, got `{other}`"),
                })
            }
        };
        let timestamp: i64 = ts.parse().map_err(|_| Error::Ingest {
            row,
            message: format!("`timestamp` is not an integer: `{ts}`"),
        })?;
        let x = Interaction {
            student: StudentId::from(student),
            question: QuestionId::from(question),
            kcs,
            correct,
            timestamp,
        };
        if !seen.insert((x.student.clone(), x.question.clone(), x.timestamp)) {
            log::debug!(
                "row {row}: duplicate ({}, {}, {}) ignored",
                x.student,
                x.question,
                x.timestamp
            );
            stats.dropped_duplicate += 1;
            continue;
        }
        rows.push(x);
    }
    if stats.dropped_duplicate > 0 {
        log::info!("ignored {} duplicate rows", stats.dropped_duplicate);
    }

    let (rows, removed_students, removed_questions, passes) = filter_sparse(rows, min_records);
    stats.removed_students = removed_students;
    stats.removed_questions = removed_questions;
    stats.filter_passes = passes;
    let dataset = Dataset::from_interactions(rows)?;
    Ok((dataset, stats))
}

/// Alternately removes sparse students and sparse questions until both
/// constraints hold simultaneously.
fn filter_sparse(
    mut rows: Vec<Interaction>,
    min_records: usize,
) -> (Vec<Interaction>, u64, u64, u32) {
    let mut removed_students = 0u64;
    let mut removed_questions = 0u64;
    let mut passes = 0u32;
    loop {
        passes += 1;
        let mut per_student: HashMap<&StudentId, usize> = HashMap::new();
        let mut per_question: HashMap<&QuestionId, usize> = HashMap::new();
        for x in &rows {
            *per_student.entry(&x.student).or_default() += 1;
            *per_question.entry(&x.question).or_default() += 1;
        }
        let sparse_students: HashSet<StudentId> = per_student
            .iter()
            .filter(|(_, &n)| n < min_records)
            .map(|(s, _)| (*s).clone())
            .collect();
        let sparse_questions: HashSet<QuestionId> = per_question
            .iter()
            .filter(|(_, &n)| n < min_records)
            .map(|(q, _)| (*q).clone())
            .collect();
        if sparse_students.is_empty() && sparse_questions.is_empty() {
            return (rows, removed_students, removed_questions, passes);
        }
        removed_students += sparse_students.len() as u64;
        removed_questions += sparse_questions.len() as u64;
        rows.retain(|x| {
            !sparse_students.contains(&x.student) && !sparse_questions.contains(&x.question)
        });
    }
}

/// Split sizes for a sequence of `n` interactions: floor(0.8n), floor(0.1n)
/// and the remainder.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 8 / 10;
    let val = n / 10;
    (train, val, n - train - val)
}

/// Cuts every student's sequence chronologically into train, val and test.
///
/// The cut is fully determined by the timestamps; `seed` only enters the
/// provenance of the result.
pub fn split(mut d: Dataset, seed: u64) -> Dataset {
    log::debug!("temporal split (seed {seed} has no effect on a chronological cut)");
    for range in d.student_ranges().into_values() {
        let (train, val, _) = split_sizes(range.len());
        for (offset, i) in range.enumerate() {
            d.splits[i] = if offset < train {
                Split::Train
            } else if offset < train + val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    fn csv_of(rows: &[(&str, &str, &str, u8, i64)]) -> String {
        let mut s = String::from("student_id,question_id,kc_ids,correct,timestamp\n");
        for (u, q, k, c, t) in rows {
            s.push_str(&format!("{u},{q},{k},{c},{t}\n"));
        }
        s
    }

    /// `students` × `questions` complete grid, every student answers every
    /// question once.
    fn grid(students: &[&str], questions: usize) -> Vec<(String, String, String, u8, i64)> {
        let mut out = Vec::new();
        for (si, s) in students.iter().enumerate() {
            for q in 0..questions {
                out.push((
                    s.to_string(),
                    format!("q{q}"),
                    format!("k{}", q % 3),
                    ((si + q) % 2) as u8,
                    (q * 1000) as i64,
                ));
            }
        }
        out
    }

    fn render(rows: &[(String, String, String, u8, i64)]) -> String {
        let borrowed: Vec<_> = rows
            .iter()
            .map(|(u, q, k, c, t)| (u.as_str(), q.as_str(), k.as_str(), *c, *t))
            .collect();
        csv_of(&borrowed)
    }

    #[test]
    fn dense_grid_is_retained() {
        // 10 students so each question reaches 10 answers.
        let students: Vec<String> = (0..10).map(|i| format!("u{i}")).collect();
        let names: Vec<&str> = students.iter().map(String::as_str).collect();
        let rows = grid(&names, 12);
        let (d, stats) = ingest(render(&rows).as_bytes()).unwrap();
        assert_eq!(d.len(), 120);
        assert_eq!(stats.removed_students, 0);
        assert_eq!(stats.removed_questions, 0);
    }

    #[test]
    fn student_below_threshold_is_removed() {
        let students: Vec<String> = (0..10).map(|i| format!("u{i}")).collect();
        let names: Vec<&str> = students.iter().map(String::as_str).collect();
        let mut rows = grid(&names, 12);
        // A sparse student answering 9 of the questions.
        for q in 0..9 {
            rows.push(("sparse".into(), format!("q{q}"), "k0".into(), 1, q as i64));
        }
        let (d, stats) = ingest(render(&rows).as_bytes()).unwrap();
        assert!(d.interactions().iter().all(|x| x.student.as_str() != "sparse"));
        assert_eq!(stats.removed_students, 1);
        assert_eq!(d.len(), 120);
    }

    #[test]
    fn filtering_reaches_fixed_point() {
        // u0..u9 answer q0..q11; `extra` sits at exactly 10 answers only
        // because `s` answered it. `s` has 9 interactions, so it goes in pass
        // one and `extra` follows in pass two.
        let students: Vec<String> = (0..9).map(|i| format!("u{i}")).collect();
        let names: Vec<&str> = students.iter().map(String::as_str).collect();
        let mut rows = grid(&names, 12);
        for u in 0..9 {
            rows.push((format!("u{u}"), "extra".into(), "k9".into(), 1, 99_000));
        }
        for q in 0..8 {
            rows.push(("s".into(), format!("q{q}"), "k0".into(), 0, q as i64));
        }
        rows.push(("s".into(), "extra".into(), "k9".into(), 1, 50));
        // Tenth answerer for q0..q11 so the grid questions survive.
        for q in 0..12 {
            rows.push(("u9".into(), format!("q{q}"), "k0".into(), 1, q as i64));
        }

        // Exhaustive recomputation oracle.
        let mut expected = rows.clone();
        loop {
            let count_s = |u: &str, xs: &[(String, String, String, u8, i64)]| {
                xs.iter().filter(|r| r.0 == u).count()
            };
            let count_q = |q: &str, xs: &[(String, String, String, u8, i64)]| {
                xs.iter().filter(|r| r.1 == q).count()
            };
            let snapshot = expected.clone();
            let before = expected.len();
            expected.retain(|r| count_s(&r.0, &snapshot) >= 10 && count_q(&r.1, &snapshot) >= 10);
            if expected.len() == before {
                break;
            }
        }

        let (d, stats) = ingest(render(&rows).as_bytes()).unwrap();
        assert_eq!(d.len(), expected.len());
        assert!(d.interactions().iter().all(|x| x.question.as_str() != "extra"));
        assert!(d.interactions().iter().all(|x| x.student.as_str() != "s"));
        assert_eq!(stats.removed_students, 1);
        assert_eq!(stats.removed_questions, 1);
        assert!(stats.filter_passes >= 3);
    }

    #[test]
    fn missing_fields_are_dropped_and_counted() {
        let students: Vec<String> = (0..10).map(|i| format!("u{i}")).collect();
        let names: Vec<&str> = students.iter().map(String::as_str).collect();
        let mut text = render(&grid(&names, 10));
        text.push_str("u0,q1,,1,5\n");
        text.push_str("u0,q1,k1,1\n");
        let (d, stats) = ingest(text.as_bytes()).unwrap();
        assert_eq!(stats.dropped_missing, 2);
        assert_eq!(d.len(), 100);
    }

    #[test]
    fn duplicates_keep_first() {
        let students: Vec<String> = (0..10).map(|i| format!("u{i}")).collect();
        let names: Vec<&str> = students.iter().map(String::as_str).collect();
        let mut rows = grid(&names, 10);
        let mut dup = rows[0].clone();
        dup.3 = 1 - dup.3;
        rows.push(dup);
        let (d, stats) = ingest(render(&rows).as_bytes()).unwrap();
        assert_eq!(stats.dropped_duplicate, 1);
        let first = d
            .interactions()
            .iter()
            .find(|x| x.student.as_str() == rows[0].0 && x.question.as_str() == rows[0].1)
            .unwrap();
        assert_eq!(first.correct, rows[0].3 == 1);
    }

    #[test]
    fn bad_value_reports_row_number() {
        let text = "student_id,question_id,kc_ids,correct,timestamp\nu,q,k,1,0\nu,q,k,yes,1\n";
        match ingest(text.as_bytes()) {
            Err(Error::Ingest { row, .. }) => assert_eq!(row, 3),
            other => panic!("expected ingest error, got {other:?}"),
        }
    }

    #[test]
    fn missing_column_is_an_error() {
        let text = "student_id,question_id,correct,timestamp\nu,q,1,0\n";
        assert!(matches!(ingest(text.as_bytes()), Err(Error::Ingest { row: 1, .. })));
    }

    #[test]
    fn everything_filtered_is_empty_dataset() {
        let text = csv_of(&[("u", "q", "k", 1, 0)]);
        assert!(matches!(ingest(text.as_bytes()), Err(Error::EmptyDataset)));
    }

    #[test]
    fn multi_kc_field_is_a_set() {
        let students: Vec<String> = (0..10).map(|i| format!("u{i}")).collect();
        let mut rows = Vec::new();
        for s in &students {
            for q in 0..10 {
                rows.push((s.clone(), format!("q{q}"), "b;a;b".to_string(), 1, q as i64));
            }
        }
        let (d, _) = ingest(render(&rows).as_bytes()).unwrap();
        let kcs: Vec<_> = d.interactions()[0].kcs.iter().map(KcId::as_str).collect();
        assert_eq!(kcs, ["a", "b"]);
    }

    #[test]
    fn split_sizes_follow_floor_rule() {
        assert_eq!(split_sizes(10), (8, 1, 1));
        assert_eq!(split_sizes(13), (10, 1, 2));
        assert_eq!(split_sizes(19), (15, 1, 3));
        assert_eq!(split_sizes(20), (16, 2, 2));
    }

    #[test]
    fn split_is_temporal_and_deterministic() {
        let students: Vec<String> = (0..10).map(|i| format!("u{i}")).collect();
        let names: Vec<&str> = students.iter().map(String::as_str).collect();
        let (d, _) = ingest(render(&grid(&names, 13)).as_bytes()).unwrap();
        let a = split(d.clone(), 3);
        let b = split(d, 3);
        assert_eq!(a, b);
        for range in a.student_ranges().into_values() {
            let labels = &a.splits()[range.clone()];
            assert!(labels.windows(2).all(|w| w[0] <= w[1]));
            let count = |s| labels.iter().filter(|&&l| l == s).count();
            assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (10, 1, 2));
            let ts: Vec<_> = a.interactions()[range].iter().map(|x| x.timestamp).collect();
            assert!(ts.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}
