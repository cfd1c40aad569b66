//! Interaction logs, Q-matrices and knowledge-level hierarchies.
//!
//! Raw identifiers are opaque strings; everything downstream works on dense
//! indices assigned in first-appearance order.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::io::{Read, Write};

use ndarray::Array2;

use crate::error::{Error, Result};

/// Bijection between raw identifiers and dense indices.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdMap {
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl IdMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_ids<I, S>(ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut map = Self::new();
        for id in ids {
            map.intern(&id.into());
        }
        map
    }

    /// Returns the index of `id`, assigning the next free one if unseen.
    pub fn intern(&mut self, id: &str) -> usize {
        if let Some(&i) = self.index.get(id) {
            return i;
        }
        let i = self.ids.len();
        self.ids.push(id.to_owned());
        self.index.insert(id.to_owned(), i);
        i
    }

    pub fn get(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn id(&self, index: usize) -> &str {
        &self.ids[index]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn rebuild_index(&mut self) {
        self.index = self.ids.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
    }
}

/// One student response, in dense indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interaction {
    pub student: usize,
    pub exercise: usize,
    pub skills: Vec<usize>,
    pub timestamp: i64,
    pub correct: bool,
    /// Position of the source row among the accepted rows.
    pub row: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct InteractionLog {
    pub students: IdMap,
    pub exercises: IdMap,
    pub skills: IdMap,
    /// One time-ordered sequence per student index.
    pub sequences: Vec<Vec<Interaction>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseMode {
    Strict,
    Lenient,
}

#[derive(Debug, Clone)]
pub struct ParsedLog {
    pub log: InteractionLog,
    pub skipped: usize,
}

const INTERACTION_HEADER: [&str; 5] = ["student_id", "exercise_id", "skill_ids", "timestamp", "correct"];

struct RawRow<'a> {
    student: &'a str,
    exercise: &'a str,
    skills: Vec<&'a str>,
    timestamp: i64,
    correct: bool,
}

fn validate_row(record: &csv::StringRecord) -> std::result::Result<RawRow<'_>, String> {
    if record.len() != INTERACTION_HEADER.len() {
        return Err(format!("expected {} fields, found {}", INTERACTION_HEADER.len(), record.len()));
    }
    let student = record[0].trim();
    let exercise = record[1].trim();
    if student.is_empty() || exercise.is_empty() {
        return Err("empty student or exercise id".into());
    }
    let mut skills: Vec<&str> = Vec::new();
    for s in record[2].split(';').map(str::trim).filter(|s| !s.is_empty()) {
        if !skills.contains(&s) {
            skills.push(s);
        }
    }
    if skills.is_empty() {
        return Err("empty skill list".into());
    }
    let timestamp: i64 = record[3].trim().parse().map_err(|_| format!("unparsable timestamp `{}`", &record[3]))?;
    if timestamp < 0 {
        return Err(format!("negative timestamp {timestamp}"));
    }
    let correct = match record[4].trim() {
        "0" => false,
        "1" => true,
        other => return Err(format!("correct must be 0 or 1, found `{other}`")),
    };
    Ok(RawRow { student, exercise, skills, timestamp, correct })
}

fn csv_reader<R: Read>(source: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::Headers).from_reader(source)
}

fn check_header(reader: &mut csv::Reader<impl Read>, expected: &[&str]) -> Result<()> {
    let headers = reader.headers().map_err(|e| Error::Header(e.to_string()))?;
    let found: Vec<&str> = headers.iter().map(|h| h.trim_start_matches('\u{feff}')).collect();
    if found != expected {
        return Err(Error::Header(format!("expected `{}`, found `{}`", expected.join(","), found.join(","))));
    }
    Ok(())
}

/// Parses `interactions.csv`.
pub fn parse_interactions<R: Read>(source: R, mode: ParseMode) -> Result<ParsedLog> {
    let mut reader = csv_reader(source);
    check_header(&mut reader, &INTERACTION_HEADER)?;

    let mut log = InteractionLog::default();
    let mut skipped = 0;
    let mut accepted = 0;
    let mut record = csv::StringRecord::new();
    loop {
        match reader.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) if mode == ParseMode::Lenient && !matches!(e.kind(), csv::ErrorKind::Io(_)) => {
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e.into()),
        }
        let line = record.position().map_or(0, |p| p.line());
        let row = match validate_row(&record) {
            Ok(row) => row,
            Err(reason) => match mode {
                ParseMode::Strict => return Err(Error::MalformedRow { line, reason }),
                ParseMode::Lenient => {
                    log::debug!("skipping line {line}: {reason}");
                    skipped += 1;
                    continue;
                }
            },
        };
        let student = log.students.intern(row.student);
        let exercise = log.exercises.intern(row.exercise);
        let skills = row.skills.iter().map(|s| log.skills.intern(s)).collect();
        if log.sequences.len() <= student {
            log.sequences.resize_with(student + 1, Vec::new);
        }
        log.sequences[student].push(Interaction {
            student,
            exercise,
            skills,
            timestamp: row.timestamp,
            correct: row.correct,
            row: accepted,
        });
        accepted += 1;
    }
    for seq in &mut log.sequences {
        // stable: ties keep file order
        seq.sort_by_key(|it| it.timestamp);
    }
    Ok(ParsedLog { log, skipped })
}

impl InteractionLog {
    /// Builds a log from already-indexed interactions, sorting each
    /// student's sequence by timestamp (stable).
    pub fn from_parts(students: IdMap, exercises: IdMap, skills: IdMap, mut sequences: Vec<Vec<Interaction>>) -> Self {
        sequences.resize_with(students.len(), Vec::new);
        for seq in &mut sequences {
            seq.sort_by_key(|it| it.timestamp);
        }
        let mut log = InteractionLog { students, exercises, skills, sequences };
        log.students.rebuild_index();
        log.exercises.rebuild_index();
        log.skills.rebuild_index();
        log
    }

    pub fn len(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_students(&self) -> usize {
        self.students.len()
    }

    pub fn n_exercises(&self) -> usize {
        self.exercises.len()
    }

    pub fn n_skills(&self) -> usize {
        self.skills.len()
    }

    pub fn sequence(&self, student: usize) -> Result<&[Interaction]> {
        self.sequences
            .get(student)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Unknown { kind: "student", id: student.to_string() })
    }

    /// Union of the skill tags seen for each exercise, in index order.
    pub fn exercise_skills(&self) -> Vec<Vec<usize>> {
        let mut sets = vec![BTreeSet::new(); self.n_exercises()];
        for it in self.sequences.iter().flatten() {
            sets[it.exercise].extend(it.skills.iter().copied());
        }
        sets.into_iter().map(|s| s.into_iter().collect()).collect()
    }

    /// Interactions in original row order.
    pub fn rows(&self) -> Vec<&Interaction> {
        let mut rows: Vec<&Interaction> = self.sequences.iter().flatten().collect();
        rows.sort_by_key(|it| it.row);
        rows
    }

    /// Writes the log back as `interactions.csv`, in original row order.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut writer = csv::Writer::from_writer(out);
        writer.write_record(INTERACTION_HEADER)?;
        for it in self.rows() {
            let skills: Vec<&str> = it.skills.iter().map(|s| self.skills.id(*s)).collect();
            writer.write_record([
                self.students.id(it.student),
                self.exercises.id(it.exercise),
                &skills.join(";"),
                &it.timestamp.to_string(),
                if it.correct { "1" } else { "0" },
            ])?;
        }
        writer.flush()?;
        Ok(())
    }

    /// Keeps the first `lengths[s]` interactions of every student.
    pub fn prefixes(&self, lengths: &[usize]) -> InteractionLog {
        let sequences = self
            .sequences
            .iter()
            .zip(lengths.iter().chain(std::iter::repeat(&0)))
            .map(|(seq, n)| seq[..(*n).min(seq.len())].to_vec())
            .collect();
        InteractionLog::from_parts(self.students.clone(), self.exercises.clone(), self.skills.clone(), sequences)
    }

    /// A log restricted to `students` (re-indexed densely, in the given
    /// order). Exercise and skill maps are kept so index spaces stay shared.
    pub fn subset_students(&self, students: &[usize]) -> InteractionLog {
        let ids = IdMap::from_ids(students.iter().map(|s| self.students.id(*s).to_owned()));
        let sequences = students
            .iter()
            .enumerate()
            .map(|(new, old)| {
                self.sequences[*old].iter().map(|it| Interaction { student: new, ..it.clone() }).collect()
            })
            .collect();
        InteractionLog::from_parts(ids, self.exercises.clone(), self.skills.clone(), sequences)
    }
}

/// Exercise x skill incidence; binary when raw, relevance weights when
/// calibrated.
#[derive(Debug, Clone, PartialEq)]
pub struct QMatrix {
    pub values: Array2<f64>,
    pub calibrated: bool,
}

impl QMatrix {
    /// Raw Q-matrix from the skill tags in the log.
    pub fn from_log(log: &InteractionLog) -> Self {
        let mut values = Array2::zeros((log.n_exercises(), log.n_skills()));
        for (e, skills) in log.exercise_skills().iter().enumerate() {
            for s in skills {
                values[[e, *s]] = 1.0;
            }
        }
        QMatrix { values, calibrated: false }
    }

    pub fn n_exercises(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_skills(&self) -> usize {
        self.values.ncols()
    }

    pub fn write_csv<W: Write>(&self, out: W, exercises: &IdMap, skills: &IdMap) -> Result<()> {
        let mut writer = csv::Writer::from_writer(out);
        let mut header = vec!["exercise_id".to_owned()];
        header.extend(skills.ids().iter().cloned());
        writer.write_record(&header)?;
        for (e, row) in self.values.rows().into_iter().enumerate() {
            let mut record = vec![exercises.id(e).to_owned()];
            record.extend(row.iter().map(|v| if self.calibrated { format!("{v}") } else { format!("{}", *v as u8) }));
            writer.write_record(&record)?;
        }
        writer.flush()?;
        Ok(())
    }
}

/// Parses `qmatrix.csv` against the index space of `log`. Every exercise of
/// the log needs a row; unknown exercise or skill ids are errors.
pub fn parse_qmatrix<R: Read>(source: R, log: &InteractionLog) -> Result<QMatrix> {
    let mut reader = csv_reader(source);
    let headers = reader.headers().map_err(|e| Error::Header(e.to_string()))?.clone();
    if headers.is_empty() || headers[0].trim_start_matches('\u{feff}') != "exercise_id" {
        return Err(Error::Header("first column must be `exercise_id`".into()));
    }
    let columns: Vec<usize> = headers
        .iter()
        .skip(1)
        .map(|h| log.skills.get(h).ok_or_else(|| Error::Unknown { kind: "skill", id: h.to_owned() }))
        .collect::<Result<_>>()?;
    let mut values = Array2::zeros((log.n_exercises(), log.n_skills()));
    let mut seen = vec![false; log.n_exercises()];
    for (n, record) in reader.records().enumerate() {
        let record = record?;
        let line = n as u64 + 2;
        if record.len() != headers.len() {
            return Err(Error::MalformedRow { line, reason: "wrong field count".into() });
        }
        let e = log
            .exercises
            .get(record[0].trim())
            .ok_or_else(|| Error::Unknown { kind: "exercise", id: record[0].to_owned() })?;
        seen[e] = true;
        for (field, col) in record.iter().skip(1).zip(&columns) {
            values[[e, *col]] = match field.trim() {
                "0" => 0.0,
                "1" => 1.0,
                other => {
                    return Err(Error::MalformedRow { line, reason: format!("Q entry must be 0/1, found `{other}`") })
                }
            };
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::IndexMismatch(format!("exercise `{}` has no Q-matrix row", log.exercises.id(missing))));
    }
    Ok(QMatrix { values, calibrated: false })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelEdge {
    pub parent: usize,
    pub child: usize,
    /// Depth of the parent below the hierarchy roots.
    pub level: u32,
}

/// Directed parent -> child skill hierarchy.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct KnowledgeLevelGraph {
    n_skills: usize,
    edges: Vec<LevelEdge>,
    parents: Vec<Vec<usize>>,
    children: Vec<Vec<usize>>,
}

impl KnowledgeLevelGraph {
    /// Builds the graph, rejecting out-of-range endpoints and cycles.
    pub fn new(n_skills: usize, links: &[(usize, usize)], names: Option<&IdMap>) -> Result<Self> {
        let name = |s: usize| names.map(|m| m.id(s).to_owned()).unwrap_or_else(|| s.to_string());
        let mut parents = vec![Vec::new(); n_skills];
        let mut children = vec![Vec::new(); n_skills];
        let mut unique = BTreeSet::new();
        for &(p, c) in links {
            if p >= n_skills || c >= n_skills {
                return Err(Error::Unknown { kind: "skill", id: p.max(c).to_string() });
            }
            if p == c {
                return Err(Error::Cycle(name(p)));
            }
            if unique.insert((p, c)) {
                children[p].push(c);
                parents[c].push(p);
            }
        }
        // Kahn's algorithm; depth = longest path from a root.
        let mut indegree: Vec<usize> = parents.iter().map(Vec::len).collect();
        let mut depth = vec![0u32; n_skills];
        let mut queue: VecDeque<usize> = (0..n_skills).filter(|s| indegree[*s] == 0).collect();
        let mut visited = 0;
        while let Some(s) = queue.pop_front() {
            visited += 1;
            for &c in &children[s] {
                depth[c] = depth[c].max(depth[s] + 1);
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    queue.push_back(c);
                }
            }
        }
        if visited < n_skills {
            let stuck = (0..n_skills).find(|s| indegree[*s] > 0).unwrap();
            return Err(Error::Cycle(name(stuck)));
        }
        let edges = unique.into_iter().map(|(p, c)| LevelEdge { parent: p, child: c, level: depth[p] }).collect();
        Ok(KnowledgeLevelGraph { n_skills, edges, parents, children })
    }

    pub fn n_skills(&self) -> usize {
        self.n_skills
    }

    pub fn edges(&self) -> &[LevelEdge] {
        &self.edges
    }

    pub fn parents(&self, skill: usize) -> &[usize] {
        &self.parents[skill]
    }

    pub fn children(&self, skill: usize) -> &[usize] {
        &self.children[skill]
    }

    pub fn write_csv<W: Write>(&self, out: W, skills: &IdMap) -> Result<()> {
        let mut writer = csv::Writer::from_writer(out);
        writer.write_record(["parent_skill", "child_skill"])?;
        for e in &self.edges {
            writer.write_record([skills.id(e.parent), skills.id(e.child)])?;
        }
        writer.flush()?;
        Ok(())
    }
}

/// Parses `levels.csv` (`parent_skill,child_skill`) against known skills.
pub fn load_knowledge_levels<R: Read>(source: R, skills: &IdMap) -> Result<KnowledgeLevelGraph> {
    let mut reader = csv_reader(source);
    match reader.headers() {
        Ok(h) if h.is_empty() => return KnowledgeLevelGraph::new(skills.len(), &[], Some(skills)),
        Ok(_) => check_header(&mut reader, &["parent_skill", "child_skill"])?,
        Err(e) => return Err(Error::Header(e.to_string())),
    }
    let mut links = Vec::new();
    for (n, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != 2 {
            return Err(Error::MalformedRow { line: n as u64 + 2, reason: "expected 2 fields".into() });
        }
        let lookup =
            |id: &str| skills.get(id.trim()).ok_or_else(|| Error::Unknown { kind: "skill", id: id.to_owned() });
        links.push((lookup(&record[0])?, lookup(&record[1])?));
    }
    KnowledgeLevelGraph::new(skills.len(), &links, Some(skills))
}

/// Tripartite student / exercise / skill structure.
#[derive(Debug, Clone, PartialEq)]
pub struct HeterogeneousGraph {
    pub n_students: usize,
    pub n_exercises: usize,
    pub n_skills: usize,
    /// `(exercise, skill, q value)` at every Q nonzero.
    pub exercise_skill: Vec<(usize, usize, f64)>,
    /// Distinct `(student, exercise)` pairs, sorted.
    pub student_exercise: Vec<(usize, usize)>,
}

impl HeterogeneousGraph {
    pub fn skills_of(&self, exercise: usize) -> impl Iterator<Item = usize> + '_ {
        self.exercise_skill.iter().filter(move |(e, _, _)| *e == exercise).map(|(_, s, _)| *s)
    }

    pub fn exercises_of(&self, skill: usize) -> impl Iterator<Item = usize> + '_ {
        self.exercise_skill.iter().filter(move |(_, s, _)| *s == skill).map(|(e, _, _)| *e)
    }
}

pub fn build_heterogeneous_graph(log: &InteractionLog, q: &QMatrix) -> Result<HeterogeneousGraph> {
    if q.n_exercises() != log.n_exercises() || q.n_skills() != log.n_skills() {
        return Err(Error::IndexMismatch(format!(
            "Q is {}x{}, log has {} exercises and {} skills",
            q.n_exercises(),
            q.n_skills(),
            log.n_exercises(),
            log.n_skills()
        )));
    }
    let exercise_skill = q.values.indexed_iter().filter(|(_, v)| **v != 0.0).map(|((e, s), v)| (e, s, *v)).collect();
    let pairs: BTreeSet<(usize, usize)> = log.sequences.iter().flatten().map(|it| (it.student, it.exercise)).collect();
    Ok(HeterogeneousGraph {
        n_students: log.n_students(),
        n_exercises: q.n_exercises(),
        n_skills: q.n_skills(),
        exercise_skill,
        student_exercise: pairs.into_iter().collect(),
    })
}
