//! Per-user chronological sequences, leave-one-out splits and the split
//! manifest format.

use super::ingest::Interaction;
use crate::error::{CoreError, Result};
use std::collections::HashMap;
use std::io::{BufRead, Write};

pub const MANIFEST_HEADER: &str = "#stosa-split v1";

/// Dense-indexed per-user sequences with leave-one-out split markers.
///
/// User ids are 1-based in first-appearance order; item ids likewise, with 0
/// reserved for padding. The last item of every sequence is the test item,
/// the second-to-last the validation item, the rest the train portion.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDataset {
    user_names: Vec<String>,
    item_names: Vec<String>,
    sequences: Vec<Vec<u32>>,
}

/// Outcome of building a dataset, including users rejected for being too
/// short to split.
#[derive(Debug)]
pub struct BuildReport {
    pub dataset: SequenceDataset,
    pub rejected_users: usize,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub density: f64,
    pub avg_interactions_per_user: f64,
}

impl SequenceDataset {
    pub fn num_users(&self) -> usize {
        self.user_names.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_names.len()
    }

    pub fn num_interactions(&self) -> usize {
        self.sequences.iter().map(|s| s.len()).sum()
    }

    /// Full chronological sequence of user `u` (1-based dense id).
    pub fn sequence(&self, u: usize) -> &[u32] {
        &self.sequences[u - 1]
    }

    /// Train portion: everything except the last two items.
    pub fn train_portion(&self, u: usize) -> &[u32] {
        let s = self.sequence(u);
        &s[..s.len() - 2]
    }

    pub fn val_item(&self, u: usize) -> u32 {
        let s = self.sequence(u);
        s[s.len() - 2]
    }

    pub fn test_item(&self, u: usize) -> u32 {
        let s = self.sequence(u);
        s[s.len() - 1]
    }

    pub fn user_name(&self, u: usize) -> &str {
        &self.user_names[u - 1]
    }

    pub fn item_name(&self, item: u32) -> &str {
        &self.item_names[item as usize - 1]
    }

    pub fn user_id(&self, name: &str) -> Option<usize> {
        self.user_names.iter().position(|n| n == name).map(|i| i + 1)
    }

    /// All items the user ever interacted with (train + val + test).
    pub fn interacted(&self, u: usize) -> std::collections::HashSet<u32> {
        self.sequence(u).iter().copied().collect()
    }

    /// Item popularity measured on train portions only.
    pub fn train_popularity(&self) -> Vec<usize> {
        let mut pop = vec![0usize; self.num_items() + 1];
        for u in 1..=self.num_users() {
            for &it in self.train_portion(u) {
                pop[it as usize] += 1;
            }
        }
        pop
    }

    pub fn stats(&self) -> DatasetStats {
        let users = self.num_users();
        let items = self.num_items();
        let interactions = self.num_interactions();
        DatasetStats {
            users,
            items,
            interactions,
            density: if users * items == 0 {
                0.0
            } else {
                interactions as f64 / (users as f64 * items as f64)
            },
            avg_interactions_per_user: if users == 0 {
                0.0
            } else {
                interactions as f64 / users as f64
            },
        }
    }

    /// Serializes the manifest. One user per line:
    /// `user<TAB>train ids<TAB>val id<TAB>test id`, preceded by the version
    /// header, a counts line, and the item vocabulary. Deterministic, so
    /// repeated prepares are byte-identical.
    pub fn write_manifest<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{MANIFEST_HEADER}")?;
        writeln!(
            w,
            "#counts users={} items={} interactions={}",
            self.num_users(),
            self.num_items(),
            self.num_interactions()
        )?;
        for (i, name) in self.item_names.iter().enumerate() {
            writeln!(w, "#item {} {}", i + 1, name)?;
        }
        for (u, seq) in self.sequences.iter().enumerate() {
            let train: Vec<String> = seq[..seq.len() - 2].iter().map(|v| v.to_string()).collect();
            writeln!(
                w,
                "{}\t{}\t{}\t{}",
                self.user_names[u],
                train.join(" "),
                seq[seq.len() - 2],
                seq[seq.len() - 1]
            )?;
        }
        Ok(())
    }

    pub fn read_manifest<R: BufRead>(reader: R) -> Result<SequenceDataset> {
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| CoreError::Data("empty manifest".into()))?
            .map_err(CoreError::Io)?;
        if header != MANIFEST_HEADER {
            return Err(CoreError::Data(format!(
                "unsupported manifest header `{header}`"
            )));
        }
        let mut item_names = Vec::new();
        let mut user_names = Vec::new();
        let mut sequences = Vec::new();
        for line in lines {
            let line = line.map_err(CoreError::Io)?;
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("#item ") {
                let (id, name) = rest
                    .split_once(' ')
                    .ok_or_else(|| CoreError::Data(format!("bad item line `{line}`")))?;
                let id: usize = id
                    .parse()
                    .map_err(|_| CoreError::Data(format!("bad item id in `{line}`")))?;
                if id != item_names.len() + 1 {
                    return Err(CoreError::Data(format!(
                        "item ids must be dense and ordered, got {id}"
                    )));
                }
                item_names.push(name.to_string());
                continue;
            }
            if line.starts_with('#') {
                continue; // counts or future annotations
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(CoreError::Data(format!("bad user line `{line}`")));
            }
            let mut seq: Vec<u32> = Vec::new();
            if !fields[1].is_empty() {
                for tok in fields[1].split(' ') {
                    seq.push(
                        tok.parse()
                            .map_err(|_| CoreError::Data(format!("bad item id `{tok}`")))?,
                    );
                }
            }
            seq.push(
                fields[2]
                    .parse()
                    .map_err(|_| CoreError::Data(format!("bad val id `{}`", fields[2])))?,
            );
            seq.push(
                fields[3]
                    .parse()
                    .map_err(|_| CoreError::Data(format!("bad test id `{}`", fields[3])))?,
            );
            if seq.len() < 3 {
                return Err(CoreError::Data(format!(
                    "user `{}` has fewer than 3 items",
                    fields[0]
                )));
            }
            if seq.iter().any(|&v| v == 0 || v as usize > item_names.len()) {
                return Err(CoreError::Data(format!(
                    "user `{}` has an out-of-range item id",
                    fields[0]
                )));
            }
            user_names.push(fields[0].to_string());
            sequences.push(seq);
        }
        Ok(SequenceDataset {
            user_names,
            item_names,
            sequences,
        })
    }

    /// Decodes every event back to `(user, item)` string pairs in sequence
    /// order; the round trip against the original filtered input is exact.
    pub fn decode_pairs(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for u in 1..=self.num_users() {
            for &it in self.sequence(u) {
                out.push((
                    self.user_name(u).to_string(),
                    self.item_name(it).to_string(),
                ));
            }
        }
        out
    }

    /// Test constructor from dense sequences (1-based ids already assigned).
    pub fn from_sequences(
        user_names: Vec<String>,
        item_names: Vec<String>,
        sequences: Vec<Vec<u32>>,
    ) -> Result<SequenceDataset> {
        if user_names.len() != sequences.len() {
            return Err(CoreError::Data("user/sequence count mismatch".into()));
        }
        for (u, s) in sequences.iter().enumerate() {
            if s.len() < 3 {
                return Err(CoreError::Data(format!(
                    "user `{}` has fewer than 3 items",
                    user_names[u]
                )));
            }
            if s.iter().any(|&v| v == 0 || v as usize > item_names.len()) {
                return Err(CoreError::Data("item id out of range".into()));
            }
        }
        Ok(SequenceDataset {
            user_names,
            item_names,
            sequences,
        })
    }
}

/// Groups interactions per user, assigns dense ids in first-appearance
/// order, sorts each user stably by timestamp, and applies the leave-one-out
/// split. Users with fewer than 3 events cannot be split and are rejected.
pub fn build_sequences(interactions: &[Interaction]) -> Result<BuildReport> {
    // count first so rejected users never consume ids
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for it in interactions {
        *counts.entry(it.user.as_str()).or_default() += 1;
    }

    let mut user_ids: HashMap<&str, usize> = HashMap::new();
    let mut item_ids: HashMap<&str, u32> = HashMap::new();
    let mut user_names = Vec::new();
    let mut item_names = Vec::new();
    // (user index, input order, timestamp, item id)
    let mut events: Vec<Vec<(i64, u32)>> = Vec::new();
    let mut rejected: HashMap<&str, ()> = HashMap::new();

    for it in interactions {
        if counts[it.user.as_str()] < 3 {
            rejected.entry(it.user.as_str()).or_insert(());
            continue;
        }
        let uid = *user_ids.entry(it.user.as_str()).or_insert_with(|| {
            user_names.push(it.user.clone());
            user_names.len() - 1
        });
        let iid = *item_ids.entry(it.item.as_str()).or_insert_with(|| {
            item_names.push(it.item.clone());
            item_names.len() as u32
        });
        if uid == events.len() {
            events.push(Vec::new());
        }
        events[uid].push((it.timestamp, iid));
    }

    let sequences: Vec<Vec<u32>> = events
        .into_iter()
        .map(|mut evs| {
            // stable sort: equal timestamps keep input order
            evs.sort_by_key(|&(ts, _)| ts);
            evs.into_iter().map(|(_, item)| item).collect()
        })
        .collect();

    Ok(BuildReport {
        dataset: SequenceDataset {
            user_names,
            item_names,
            sequences,
        },
        rejected_users: rejected.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(user: &str, item: &str, ts: i64) -> Interaction {
        Interaction {
            user: user.into(),
            item: item.into(),
            timestamp: ts,
        }
    }

    #[test]
    fn sorts_by_timestamp_and_splits() {
        let evs = vec![ev("u1", "iA", 3), ev("u1", "iB", 1), ev("u1", "iC", 2)];
        let r = build_sequences(&evs).unwrap();
        let d = &r.dataset;
        // sorted: iB, iC, iA
        assert_eq!(d.sequence(1), &[2, 3, 1]);
        assert_eq!(d.item_name(d.test_item(1)), "iA");
        assert_eq!(d.item_name(d.val_item(1)), "iC");
        assert_eq!(d.train_portion(1).len(), 1);
        assert_eq!(d.item_name(d.train_portion(1)[0]), "iB");
    }

    #[test]
    fn equal_timestamps_keep_file_order() {
        let evs = vec![
            ev("u1", "first", 7),
            ev("u1", "second", 7),
            ev("u1", "third", 7),
        ];
        let d = build_sequences(&evs).unwrap().dataset;
        let names: Vec<&str> = d.sequence(1).iter().map(|&i| d.item_name(i)).collect();
        assert_eq!(names, vec!["first", "second", "third"]);
    }

    #[test]
    fn five_users_five_items() {
        let mut evs = Vec::new();
        for u in 0..5 {
            for i in 0..5 {
                evs.push(ev(&format!("u{u}"), &format!("i{u}_{i}"), i as i64));
            }
        }
        let d = build_sequences(&evs).unwrap().dataset;
        assert_eq!(d.num_users(), 5);
        assert!(d.sequences.iter().all(|s| s.len() == 5));
    }

    #[test]
    fn short_users_rejected() {
        let evs = vec![
            ev("short", "x", 1),
            ev("short", "y", 2),
            ev("ok", "a", 1),
            ev("ok", "b", 2),
            ev("ok", "c", 3),
        ];
        let r = build_sequences(&evs).unwrap();
        assert_eq!(r.rejected_users, 1);
        assert_eq!(r.dataset.num_users(), 1);
        assert_eq!(r.dataset.user_name(1), "ok");
    }

    #[test]
    fn manifest_round_trip_is_exact() {
        let evs = vec![
            ev("alice", "iA", 3),
            ev("alice", "iB", 1),
            ev("alice", "iC", 2),
            ev("bob", "iB", 5),
            ev("bob", "iD", 6),
            ev("bob", "iA", 7),
            ev("bob", "iB", 8),
        ];
        let d = build_sequences(&evs).unwrap().dataset;
        let mut buf = Vec::new();
        d.write_manifest(&mut buf).unwrap();
        let back = SequenceDataset::read_manifest(&buf[..]).unwrap();
        assert_eq!(d, back);

        // byte-identical on rewrite
        let mut buf2 = Vec::new();
        back.write_manifest(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn decode_pairs_round_trip() {
        let evs = vec![
            ev("u1", "iA", 1),
            ev("u1", "iB", 2),
            ev("u1", "iA", 3),
            ev("u2", "iC", 1),
            ev("u2", "iA", 2),
            ev("u2", "iC", 3),
        ];
        let d = build_sequences(&evs).unwrap().dataset;
        let pairs = d.decode_pairs();
        let expected: Vec<(String, String)> = evs
            .iter()
            .map(|e| (e.user.clone(), e.item.clone()))
            .collect();
        assert_eq!(pairs, expected);
    }

    #[test]
    fn manifest_rejects_unknown_header() {
        let bad = b"#other-format v9\n".to_vec();
        assert!(SequenceDataset::read_manifest(&bad[..]).is_err());
    }
}
