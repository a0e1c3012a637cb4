//! Byte-level BPE tokenizer.
//!
//! Ids are dense: 0..256 are raw bytes, 256..256+M are merges in training
//! order, and the last four ids are the specials PAD, SOT (start of
//! transcription), EOT (end of transcription), and TASK_TRANSCRIBE.
//! Encoding replays the merges in training order, so byte fallback means
//! there is no out-of-vocabulary input.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const N_SPECIALS: usize = 4;

pub type TokenId = u32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    merges: Vec<(TokenId, TokenId)>,
    /// Byte expansion of every non-special id.
    expansions: Vec<Vec<u8>>,
}

impl Vocab {
    pub fn from_merges(merges: Vec<(TokenId, TokenId)>) -> Result<Self> {
        let mut expansions: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        for (i, &(a, b)) in merges.iter().enumerate() {
            let limit = (256 + i) as TokenId;
            if a >= limit || b >= limit {
                return Err(Error::Vocab(format!(
                    "merge {i} references id out of range: ({a}, {b})"
                )));
            }
            let mut bytes = expansions[a as usize].clone();
            bytes.extend_from_slice(&expansions[b as usize]);
            expansions.push(bytes);
        }
        Ok(Self { merges, expansions })
    }

    pub fn n_merges(&self) -> usize {
        self.merges.len()
    }

    pub fn merges(&self) -> &[(TokenId, TokenId)] {
        &self.merges
    }

    pub fn size(&self) -> usize {
        256 + self.merges.len() + N_SPECIALS
    }

    pub fn pad_id(&self) -> TokenId {
        (256 + self.merges.len()) as TokenId
    }

    pub fn sot_id(&self) -> TokenId {
        self.pad_id() + 1
    }

    pub fn eot_id(&self) -> TokenId {
        self.pad_id() + 2
    }

    pub fn task_transcribe_id(&self) -> TokenId {
        self.pad_id() + 3
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        id >= self.pad_id() && (id as usize) < self.size()
    }

    pub fn encode(&self, text: &str, wrap: bool) -> Vec<TokenId> {
        self.encode_bytes(text.as_bytes(), wrap)
    }

    pub fn encode_bytes(&self, bytes: &[u8], wrap: bool) -> Vec<TokenId> {
        let mut ids: Vec<TokenId> = bytes.iter().map(|&b| b as TokenId).collect();
        for (i, &pair) in self.merges.iter().enumerate() {
            apply_merge(&mut ids, pair, (256 + i) as TokenId);
        }
        if wrap {
            let mut wrapped = Vec::with_capacity(ids.len() + 3);
            wrapped.push(self.sot_id());
            wrapped.push(self.task_transcribe_id());
            wrapped.extend_from_slice(&ids);
            wrapped.push(self.eot_id());
            wrapped
        } else {
            ids
        }
    }

    /// Expands ids back to bytes; specials are dropped.
    pub fn decode(&self, ids: &[TokenId]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            if id as usize >= self.size() {
                return Err(Error::Vocab(format!(
                    "id {id} out of range for vocab of {}",
                    self.size()
                )));
            }
            if self.is_special(id) {
                continue;
            }
            out.extend_from_slice(&self.expansions[id as usize]);
        }
        Ok(out)
    }

    pub fn decode_string(&self, ids: &[TokenId]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.decode(ids)?).into_owned())
    }

    /// Canonical text form: a header line with the base/merge/special
    /// counts, then one merge per line as two decimal ids.
    pub fn to_file_string(&self) -> String {
        let mut out = format!("256 {} {}\n", self.merges.len(), N_SPECIALS);
        for &(a, b) in &self.merges {
            out.push_str(&format!("{a} {b}\n"));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_file_string(&text)
    }

    pub fn from_file_string(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Vocab("empty vocab file".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 3 || fields[0] != "256" {
            return Err(Error::Vocab(format!("bad vocab header: {header}")));
        }
        let n_merges: usize = fields[1]
            .parse()
            .map_err(|_| Error::Vocab(format!("bad merge count: {}", fields[1])))?;
        let mut merges = Vec::with_capacity(n_merges);
        for line in lines {
            let mut parts = line.split_whitespace();
            let a = parts.next().and_then(|v| v.parse().ok());
            let b = parts.next().and_then(|v| v.parse().ok());
            match (a, b, parts.next()) {
                (Some(a), Some(b), None) => merges.push((a, b)),
                _ => return Err(Error::Vocab(format!("bad merge line: {line}"))),
            }
        }
        if merges.len() != n_merges {
            return Err(Error::Vocab(format!(
                "header promises {n_merges} merges, file has {}",
                merges.len()
            )));
        }
        Self::from_merges(merges)
    }

    /// FNV-1a over the canonical file form; checkpoints store this to pin
    /// the vocab they were trained with.
    pub fn hash(&self) -> u64 {
        fnv1a(self.to_file_string().as_bytes())
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn apply_merge(ids: &mut Vec<TokenId>, pair: (TokenId, TokenId), new_id: TokenId) {
    let mut w = 0;
    let mut r = 0;
    while r < ids.len() {
        if r + 1 < ids.len() && ids[r] == pair.0 && ids[r + 1] == pair.1 {
            ids[w] = new_id;
            r += 2;
        } else {
            ids[w] = ids[r];
            r += 1;
        }
        w += 1;
    }
    ids.truncate(w);
}

/// Greedy BPE training: repeatedly merge the most frequent adjacent pair,
/// breaking ties toward the lower (first, second) id pair, until the merge
/// budget is spent or no pair occurs at least twice.
pub fn train_bpe(corpus: &[String], target_vocab: usize) -> Result<Vocab> {
    if corpus.is_empty() {
        return Err(Error::Config("BPE training corpus is empty".into()));
    }
    if target_vocab < 256 + N_SPECIALS {
        return Err(Error::Config(format!(
            "target vocab {target_vocab} below byte+special floor {}",
            256 + N_SPECIALS
        )));
    }
    let budget = target_vocab - 256 - N_SPECIALS;
    let mut seqs: Vec<Vec<TokenId>> = corpus
        .iter()
        .map(|s| s.as_bytes().iter().map(|&b| b as TokenId).collect())
        .collect();
    let mut merges: Vec<(TokenId, TokenId)> = Vec::new();

    while merges.len() < budget {
        let mut counts: HashMap<(TokenId, TokenId), usize> = HashMap::new();
        for seq in &seqs {
            for win in seq.windows(2) {
                *counts.entry((win[0], win[1])).or_insert(0) += 1;
            }
        }
        let best = counts
            .into_iter()
            .max_by_key(|&(pair, count)| (count, std::cmp::Reverse(pair)));
        let Some((pair, count)) = best else { break };
        if count < 2 {
            break;
        }
        let new_id = (256 + merges.len()) as TokenId;
        for seq in &mut seqs {
            apply_merge(seq, pair, new_id);
        }
        merges.push(pair);
    }
    Vocab::from_merges(merges)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn repeated_byte_merges_itself() {
        let v = train_bpe(&["aaaa".to_string()], 256 + N_SPECIALS + 1).unwrap();
        assert_eq!(v.merges(), &[(97, 97)]);
    }

    #[test]
    fn byte_floor_vocab_has_no_merges() {
        let v = train_bpe(&["anything".to_string()], 256 + N_SPECIALS).unwrap();
        assert_eq!(v.n_merges(), 0);
        assert_eq!(v.encode("a", false), vec![97]);
    }

    #[test]
    fn abab_stops_after_one_merge() {
        // "ab" occurs twice and merges; the resulting (ab, ab) pair occurs
        // only once, below the threshold, so training stops early.
        let v = train_bpe(&["abab".to_string()], 256 + N_SPECIALS + 2).unwrap();
        assert_eq!(v.merges(), &[(97, 98)]);
    }

    #[test]
    fn tie_breaks_toward_lower_pair() {
        // "bbaa": pairs (98,98), (98,97), (97,97)... each occurs once.
        // Double it so (97,97) and (98,98) both occur twice.
        let v = train_bpe(&["bbaa".to_string(), "bbaa".to_string()], 256 + N_SPECIALS + 1).unwrap();
        assert_eq!(v.merges(), &[(97, 97)]);
    }

    #[test]
    fn wrap_adds_protocol_tokens() {
        let v = train_bpe(&["x".to_string()], 256 + N_SPECIALS).unwrap();
        assert_eq!(
            v.encode("", true),
            vec![v.sot_id(), v.task_transcribe_id(), v.eot_id()]
        );
        let ids = v.encode("hi", true);
        assert_eq!(ids[0], v.sot_id());
        assert_eq!(ids[1], v.task_transcribe_id());
        assert_eq!(*ids.last().unwrap(), v.eot_id());
        assert_eq!(v.decode_string(&ids).unwrap(), "hi");
    }

    #[test]
    fn decode_drops_specials_and_rejects_bad_ids() {
        let v = train_bpe(&["hi".to_string()], 256 + N_SPECIALS).unwrap();
        assert_eq!(
            v.decode_string(&[v.sot_id(), 104, 105, v.eot_id()]).unwrap(),
            "hi"
        );
        assert_eq!(v.decode_string(&[]).unwrap(), "");
        assert!(v.decode(&[v.size() as u32]).is_err());
    }

    #[test]
    fn specials_never_appear_unwrapped() {
        let corpus = vec!["the cat sat on the mat".to_string(); 4];
        let v = train_bpe(&corpus, 300).unwrap();
        let ids = v.encode("the cat", false);
        assert!(ids.iter().all(|&id| !v.is_special(id)));
    }

    #[test]
    fn file_roundtrip_is_exact() {
        let corpus = vec!["hello world hello".to_string(); 3];
        let v = train_bpe(&corpus, 270).unwrap();
        let text = v.to_file_string();
        let back = Vocab::from_file_string(&text).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.hash(), v.hash());
    }

    proptest! {
        #[test]
        fn roundtrip_random_bytes(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
            let corpus = vec!["some shared training text".to_string(); 3];
            let v = train_bpe(&corpus, 280).unwrap();
            let ids = v.encode_bytes(&bytes, false);
            prop_assert_eq!(v.decode(&ids).unwrap(), bytes);
        }

        #[test]
        fn roundtrip_random_strings(s in ".{0,80}") {
            let corpus = vec!["abcdefgh ijklmnop".to_string(); 3];
            let v = train_bpe(&corpus, 300).unwrap();
            let wrapped = v.encode(&s, true);
            prop_assert_eq!(v.decode(&wrapped).unwrap(), s.as_bytes());
            let plain = v.encode(&s, false);
            prop_assert_eq!(v.decode(&plain).unwrap(), s.as_bytes());
        }

        #[test]
        fn encoding_is_deterministic(s in ".{0,60}") {
            let corpus = vec!["deterministic encoding".to_string(); 2];
            let v = train_bpe(&corpus, 290).unwrap();
            prop_assert_eq!(v.encode(&s, false), v.encode(&s, false));
        }
    }
}
