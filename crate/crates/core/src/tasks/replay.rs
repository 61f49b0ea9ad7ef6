//! JSONL export of sampled episodes and a pool that replays them.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{Episode, EpisodeSource, Example, Result, TaskError};
use crate::nn::{Input, Loss, Target};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Support,
    Query,
}

/// One line of an exported suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExampleRecord {
    pub task_id: u64,
    pub episode_index: u64,
    pub split: Split,
    pub input: Input,
    pub target: Target,
}

pub fn write_episodes_jsonl<W: Write>(mut w: W, episodes: &[(u64, u64, &Episode)]) -> Result<()> {
    for &(task_id, episode_index, ep) in episodes {
        for (split, examples) in [(Split::Support, &ep.support), (Split::Query, &ep.query)] {
            for ex in examples {
                let rec = ExampleRecord {
                    task_id,
                    episode_index,
                    split,
                    input: ex.input.clone(),
                    target: ex.target.clone(),
                };
                serde_json::to_writer(&mut w, &rec).map_err(std::io::Error::from)?;
                w.write_all(b"\n")?;
            }
        }
    }
    Ok(())
}

/// Groups records by `(task_id, episode_index)`, keeping file order within each split.
pub fn read_episodes_jsonl<R: BufRead>(r: R) -> Result<BTreeMap<(u64, u64), Episode>> {
    let mut out: BTreeMap<(u64, u64), Episode> = BTreeMap::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ExampleRecord = serde_json::from_str(&line).map_err(|e| TaskError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        let ep = out.entry((rec.task_id, rec.episode_index)).or_insert_with(|| Episode {
            support: Vec::new(),
            query: Vec::new(),
        });
        let ex = Example::new(rec.input, rec.target);
        match rec.split {
            Split::Support => ep.support.push(ex),
            Split::Query => ep.query.push(ex),
        }
    }
    Ok(out)
}

/// Serves previously exported episodes in place of a generator.
#[derive(Debug, Clone)]
pub struct ReplaySuite {
    task_ids: Vec<u64>,
    loss: Loss,
    episodes: BTreeMap<(u64, u64), Episode>,
}

impl ReplaySuite {
    /// `task_ids` fixes the slot order, which must match the exporting run.
    pub fn new(task_ids: Vec<u64>, loss: Loss, episodes: BTreeMap<(u64, u64), Episode>) -> Self {
        Self {
            task_ids,
            loss,
            episodes,
        }
    }

    pub fn episode_count(&self) -> usize {
        self.episodes.len()
    }
}

impl EpisodeSource for ReplaySuite {
    fn task_count(&self) -> usize {
        self.task_ids.len()
    }

    fn task_id(&self, slot: usize) -> u64 {
        self.task_ids[slot]
    }

    fn episode(&self, slot: usize, n_support: usize, n_query: usize, index: u64) -> Result<Episode> {
        let task = self.task_ids[slot];
        let ep = self
            .episodes
            .get(&(task, index))
            .ok_or(TaskError::Missing { task, index })?;
        if ep.support.len() != n_support || ep.query.len() != n_query {
            return Err(TaskError::Contract(format!(
                "recorded episode {index} of task {task} has {}+{} examples, wanted {n_support}+{n_query}",
                ep.support.len(),
                ep.query.len()
            )));
        }
        Ok(ep.clone())
    }

    fn loss(&self) -> Loss {
        self.loss
    }
}

#[cfg(test)]
mod tests {
    use super::super::*;
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        for suite in [
            make_sinusoid_suite(2, 5).unwrap(),
            make_shared_lowrank_suite(2, 3, 1, 0.1, 5).unwrap(),
            make_sequence_suite(2, 5, 4, 5).unwrap(),
        ] {
            let eps: Vec<Episode> = (0..2).map(|i| sample_episode(&suite.tasks[i], 3, 2, 7).unwrap()).collect();
            let listed: Vec<(u64, u64, &Episode)> = eps.iter().enumerate().map(|(i, e)| (i as u64, 7, e)).collect();
            let mut buf = Vec::new();
            write_episodes_jsonl(&mut buf, &listed).unwrap();
            assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), 10);
            let back = read_episodes_jsonl(buf.as_slice()).unwrap();
            let replay = ReplaySuite::new(vec![0, 1], suite.spec.loss(), back);
            for (slot, ep) in eps.iter().enumerate() {
                assert_eq!(&replay.episode(slot, 3, 2, 7).unwrap(), ep);
            }
            assert!(matches!(replay.episode(0, 3, 2, 8), Err(TaskError::Missing { .. })));
            assert!(matches!(replay.episode(0, 2, 2, 7), Err(TaskError::Contract(_))));
        }
    }

    #[test]
    fn line_schema() {
        let ep = Episode {
            support: vec![Example::new(Input::Features(vec![0.5]), Target::Values(vec![1.5]))],
            query: vec![Example::new(Input::Tokens(vec![1, 2]), Target::Class(1))],
        };
        let mut buf = Vec::new();
        write_episodes_jsonl(&mut buf, &[(3, 4, &ep)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines[0],
            r#"{"task_id":3,"episode_index":4,"split":"support","input":[0.5],"target":[1.5]}"#
        );
        assert_eq!(
            lines[1],
            r#"{"task_id":3,"episode_index":4,"split":"query","input":[1,2],"target":1}"#
        );
        let bad = r#"{"task_id":3,"episode_index":4,"split":"query","input":[1],"target":1,"x":0}"#;
        assert!(matches!(
            read_episodes_jsonl(bad.as_bytes()),
            Err(TaskError::Parse { line: 1, .. })
        ));
    }
}
