use std::collections::BTreeMap;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use ngfkt_core::model::{forward, Segment, SequenceBatch};
use ngfkt_core::train::TrainedModel;
use ngfkt_core::{Checkpoint, ExerciseRelationMatrix, RelationConfig};

use super::Dataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub time: i64,
    /// Interactions at or before `time` that the window saw.
    pub history: usize,
    pub mastery: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadarSnapshot {
    pub student: String,
    pub snapshots: Vec<Snapshot>,
}

/// Mastery of a skill at `T` is the mean predicted probability of a
/// correct answer at `T` over the exercises tagged with the skill.
pub fn radar_snapshot(
    ds: &Dataset,
    ckpt: &Checkpoint,
    student: &str,
    times: &[i64],
    skills: &[String],
) -> Result<RadarSnapshot> {
    let model = TrainedModel::from_checkpoint(ckpt)?;
    if model.params.n_exercises() != ds.log.n_exercises() {
        bail!("checkpoint covers {} exercises, data has {}", model.params.n_exercises(), ds.log.n_exercises());
    }
    let s = ds.log.students.get(student).with_context(|| format!("unknown student `{student}`"))?;
    let skill_ids: Vec<(String, usize)> = if skills.is_empty() {
        ds.log.skills.ids().iter().cloned().enumerate().map(|(i, id)| (id, i)).collect()
    } else {
        skills
            .iter()
            .map(|id| ds.log.skills.get(id).map(|i| (id.clone(), i)).with_context(|| format!("unknown skill `{id}`")))
            .collect::<Result<_>>()?
    };
    let a = ExerciseRelationMatrix { values: model.relation.clone(), config: RelationConfig::default() };
    let sequence = ds.log.sequence(s)?;
    let mut snapshots = Vec::with_capacity(times.len());
    for &t in times {
        let seen = sequence.iter().take_while(|x| x.timestamp <= t).count();
        let mut window = Segment::default();
        for x in &sequence[seen.saturating_sub(model.config.max_seq)..seen] {
            window.push(x.exercise, x.correct, x.timestamp);
        }
        let mut p = vec![None; ds.log.n_exercises()];
        let mut mastery = BTreeMap::new();
        for (id, k) in &skill_ids {
            let mut sum = 0.0;
            let mut n = 0usize;
            for e in (0..ds.q.n_exercises()).filter(|e| ds.q.values[[*e, *k]] > 0.0) {
                let v = match p[e] {
                    Some(v) => v,
                    None => {
                        let v = forward(
                            &SequenceBatch::new(window.clone(), e, t, &a)?,
                            &model.params,
                            &model.config,
                            None,
                        )?;
                        p[e] = Some(v);
                        v
                    }
                };
                sum += v;
                n += 1;
            }
            if n == 0 {
                bail!("skill `{id}` tags no exercise");
            }
            mastery.insert(id.clone(), sum / n as f64);
        }
        snapshots.push(Snapshot { time: t, history: window.len(), mastery });
    }
    Ok(RadarSnapshot { student: student.to_owned(), snapshots })
}
