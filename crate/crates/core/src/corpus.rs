//! Event-log ingestion, filtering, temporal splitting and sequence splitting.
//!
//! The pipeline is `read_events → build_sessions → filter_corpus →
//! temporal_split → SessionCorpus::from_split`. [`prepare`] runs all of it.

use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawEvent {
    pub session_id: String,
    pub item_id: String,
    pub timestamp: i64,
}

/// Column mapping for a delimiter-separated event log.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventFormat {
    pub delimiter: u8,
    pub session_col: usize,
    pub item_col: usize,
    pub time_col: usize,
    pub has_header: bool,
}

impl Default for EventFormat {
    fn default() -> Self {
        EventFormat {
            delimiter: b',',
            session_col: 0,
            item_col: 1,
            time_col: 2,
            has_header: true,
        }
    }
}

pub fn load_events(path: impl AsRef<Path>, format: &EventFormat) -> Result<Vec<RawEvent>> {
    let file = std::fs::File::open(path)?;
    read_events(std::io::BufReader::new(file), format)
}

pub fn read_events<R: Read>(reader: R, format: &EventFormat) -> Result<Vec<RawEvent>> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(format.delimiter)
        .has_headers(format.has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut events = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::MalformedRecord {
                line,
                message: e.to_string(),
            }
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.iter().all(str::is_empty) {
            continue;
        }
        let field = |col: usize, what: &str| {
            record.get(col).ok_or_else(|| Error::MalformedRecord {
                line,
                message: format!("missing {what} column {col}"),
            })
        };
        let session_id = field(format.session_col, "session")?.to_string();
        let item_id = field(format.item_col, "item")?.to_string();
        let raw_ts = field(format.time_col, "timestamp")?;
        let timestamp: i64 = raw_ts.parse().map_err(|_| Error::MalformedRecord {
            line,
            message: format!("timestamp `{raw_ts}` is not an integer"),
        })?;
        if timestamp < 0 {
            return Err(Error::MalformedRecord {
                line,
                message: format!("negative timestamp {timestamp}"),
            });
        }
        if session_id.is_empty() || item_id.is_empty() {
            return Err(Error::MalformedRecord {
                line,
                message: "empty session or item id".into(),
            });
        }
        events.push(RawEvent {
            session_id,
            item_id,
            timestamp,
        });
    }
    if events.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(events)
}

/// A session before reindexing: raw item ids in time order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawSession {
    pub id: String,
    pub items: Vec<String>,
    /// Timestamp of the last event.
    pub last_timestamp: i64,
}

/// Groups events by session and orders each session by timestamp, keeping
/// input order among ties. Sessions appear in order of first occurrence.
pub fn build_sessions(events: &[RawEvent]) -> Vec<RawSession> {
    let mut slot: HashMap<&str, usize> = HashMap::new();
    let mut grouped: Vec<(&str, Vec<&RawEvent>)> = Vec::new();
    for ev in events {
        let i = *slot.entry(ev.session_id.as_str()).or_insert_with(|| {
            grouped.push((ev.session_id.as_str(), Vec::new()));
            grouped.len() - 1
        });
        grouped[i].1.push(ev);
    }
    grouped
        .into_iter()
        .map(|(id, mut evs)| {
            evs.sort_by_key(|e| e.timestamp);
            RawSession {
                id: id.to_string(),
                last_timestamp: evs.last().map_or(0, |e| e.timestamp),
                items: evs.into_iter().map(|e| e.item_id.clone()).collect(),
            }
        })
        .collect()
}

/// Drops rare items and short sessions until both constraints hold at once.
pub fn filter_corpus(
    sessions: Vec<RawSession>,
    min_session_len: usize,
    min_item_freq: usize,
) -> Result<Vec<RawSession>> {
    let mut sessions = sessions;
    loop {
        let mut freq: HashMap<&str, usize> = HashMap::new();
        for s in &sessions {
            for it in &s.items {
                *freq.entry(it.as_str()).or_default() += 1;
            }
        }
        let rare: HashSet<String> = freq
            .into_iter()
            .filter(|&(_, n)| n < min_item_freq)
            .map(|(k, _)| k.to_string())
            .collect();
        let before: usize = sessions.iter().map(|s| s.items.len()).sum::<usize>() + sessions.len();
        sessions = sessions
            .into_iter()
            .filter_map(|mut s| {
                if !rare.is_empty() {
                    s.items.retain(|it| !rare.contains(it));
                }
                (s.items.len() >= min_session_len).then_some(s)
            })
            .collect();
        let after: usize = sessions.iter().map(|s| s.items.len()).sum::<usize>() + sessions.len();
        if after == before {
            break;
        }
    }
    if sessions.is_empty() {
        return Err(Error::EmptyCorpus(format!(
            "no session survives filtering (min length {min_session_len}, min item frequency {min_item_freq})"
        )));
    }
    Ok(sessions)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SplitBoundary {
    /// Sessions whose last event is at or after this timestamp are test.
    Timestamp(i64),
    /// The latest fraction of sessions (by last event) are test.
    Fraction(f64),
}

/// Splits sessions by time. Test items unseen in train are removed from test
/// sessions, and test sessions left shorter than two are discarded.
pub fn temporal_split(
    sessions: Vec<RawSession>,
    boundary: SplitBoundary,
) -> Result<(Vec<RawSession>, Vec<RawSession>)> {
    let mut sessions = sessions;
    // Stable: equal timestamps keep their incoming order.
    sessions.sort_by_key(|s| s.last_timestamp);

    let cut_ts = match boundary {
        SplitBoundary::Timestamp(ts) => ts,
        SplitBoundary::Fraction(f) => {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::InvalidArgument(format!(
                    "test fraction {f} is outside [0, 1]"
                )));
            }
            let n = sessions.len();
            let cut = n - ((n as f64) * f).round() as usize;
            if cut >= n {
                i64::MAX
            } else {
                sessions[cut].last_timestamp
            }
        }
    };
    let (train, test): (Vec<_>, Vec<_>) = sessions
        .into_iter()
        .partition(|s| s.last_timestamp < cut_ts);
    if train.is_empty() {
        return Err(Error::EmptyCorpus("the split leaves no training sessions".into()));
    }
    let known: HashSet<&str> = train
        .iter()
        .flat_map(|s| s.items.iter().map(String::as_str))
        .collect();
    let test: Vec<RawSession> = test
        .into_iter()
        .filter_map(|mut s| {
            s.items.retain(|it| known.contains(it.as_str()));
            (s.items.len() >= 2).then_some(s)
        })
        .collect();
    if test.is_empty() {
        return Err(Error::EmptyCorpus("the split leaves no test sessions".into()));
    }
    Ok((train, test))
}

/// A reindexed session.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Session {
    pub original_id: String,
    pub items: Vec<usize>,
    pub last_timestamp: i64,
}

/// One labelled prefix produced by sequence splitting.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub prefix: Vec<usize>,
    pub label: usize,
    /// Index of the parent session within its split.
    pub session: usize,
}

/// `[a,b,c,d] → ([a],b), ([a,b],c), ([a,b,c],d)`.
pub fn sequence_split(items: &[usize]) -> Result<Vec<(Vec<usize>, usize)>> {
    if items.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "sequence splitting needs at least 2 items, got {}",
            items.len()
        )));
    }
    Ok((1..items.len())
        .map(|end| (items[..end].to_vec(), items[end]))
        .collect())
}

fn samples_of(sessions: &[Session]) -> Vec<Sample> {
    sessions
        .iter()
        .enumerate()
        .flat_map(|(si, s)| {
            sequence_split(&s.items)
                .expect("corpus sessions have length ≥ 2")
                .into_iter()
                .map(move |(prefix, label)| Sample {
                    prefix,
                    label,
                    session: si,
                })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SessionCorpus {
    pub train_sessions: Vec<Session>,
    pub test_sessions: Vec<Session>,
    /// Raw item id of each index.
    pub item_vocab: Vec<String>,
    pub train_samples: Vec<Sample>,
    pub test_samples: Vec<Sample>,
    vocab_index: HashMap<String, usize>,
}

pub const CORPUS_MAGIC: &[u8; 4] = b"CTRC";
pub const CORPUS_VERSION: u32 = 1;

impl SessionCorpus {
    /// Indexes items by first appearance in the (time-ordered) train sessions.
    pub fn from_split(train: Vec<RawSession>, test: Vec<RawSession>) -> Result<Self> {
        let mut vocab = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        for s in &train {
            for it in &s.items {
                if !index.contains_key(it) {
                    index.insert(it.clone(), vocab.len());
                    vocab.push(it.clone());
                }
            }
        }
        let reindex = |s: RawSession| -> Result<Session> {
            let items = s
                .items
                .iter()
                .map(|it| {
                    index.get(it).copied().ok_or_else(|| {
                        Error::InvalidArgument(format!("test item `{it}` never occurs in train"))
                    })
                })
                .collect::<Result<_>>()?;
            Ok(Session {
                original_id: s.id,
                items,
                last_timestamp: s.last_timestamp,
            })
        };
        let train: Vec<Session> = train.into_iter().map(reindex).collect::<Result<_>>()?;
        let test: Vec<Session> = test.into_iter().map(reindex).collect::<Result<_>>()?;
        Self::from_sessions(vocab, train, test)
    }

    pub fn from_sessions(
        item_vocab: Vec<String>,
        train_sessions: Vec<Session>,
        test_sessions: Vec<Session>,
    ) -> Result<Self> {
        let n = item_vocab.len();
        for s in train_sessions.iter().chain(&test_sessions) {
            if s.items.len() < 2 {
                return Err(Error::InvalidArgument(format!(
                    "session `{}` has fewer than 2 items",
                    s.original_id
                )));
            }
            if let Some(&bad) = s.items.iter().find(|&&i| i >= n) {
                return Err(Error::IndexOutOfRange {
                    what: "item vocabulary",
                    index: bad,
                    size: n,
                });
            }
        }
        let vocab_index = item_vocab
            .iter()
            .enumerate()
            .map(|(i, v)| (v.clone(), i))
            .collect();
        Ok(SessionCorpus {
            train_samples: samples_of(&train_sessions),
            test_samples: samples_of(&test_sessions),
            train_sessions,
            test_sessions,
            item_vocab,
            vocab_index,
        })
    }

    pub fn n_items(&self) -> usize {
        self.item_vocab.len()
    }

    pub fn item_index(&self, raw_id: &str) -> Option<usize> {
        self.vocab_index.get(raw_id).copied()
    }

    pub fn summary(&self) -> CorpusSummary {
        let total_len: usize = self
            .train_sessions
            .iter()
            .chain(&self.test_sessions)
            .map(|s| s.items.len())
            .sum();
        let n_sessions = self.train_sessions.len() + self.test_sessions.len();
        CorpusSummary {
            n_items: self.n_items(),
            train_sessions: self.train_sessions.len(),
            test_sessions: self.test_sessions.len(),
            train_samples: self.train_samples.len(),
            test_samples: self.test_samples.len(),
            average_length: total_len as f64 / n_sessions.max(1) as f64,
        }
    }

    /// Serializes the corpus. Layout, all integers little-endian:
    ///
    /// ```text
    /// magic b"CTRC", version u32, n_items u32, n_train u32, n_test u32
    /// n_items × { len u32, utf-8 raw item id }
    /// (n_train + n_test) × { id_len u32, id utf-8, last_timestamp i64,
    ///                        len u32, items u32 × len }
    /// ```
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CORPUS_MAGIC)?;
        for v in [
            CORPUS_VERSION,
            self.n_items() as u32,
            self.train_sessions.len() as u32,
            self.test_sessions.len() as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for item in &self.item_vocab {
            write_str(&mut w, item)?;
        }
        for s in self.train_sessions.iter().chain(&self.test_sessions) {
            write_str(&mut w, &s.original_id)?;
            w.write_all(&s.last_timestamp.to_le_bytes())?;
            w.write_all(&(s.items.len() as u32).to_le_bytes())?;
            for &i in &s.items {
                w.write_all(&(i as u32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CORPUS_MAGIC {
            return Err(Error::Format("not a corpus file (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CORPUS_VERSION {
            return Err(Error::Format(format!("unsupported corpus version {version}")));
        }
        let n_items = read_u32(&mut r)? as usize;
        let n_train = read_u32(&mut r)? as usize;
        let n_test = read_u32(&mut r)? as usize;
        let vocab = (0..n_items)
            .map(|_| read_str(&mut r))
            .collect::<Result<Vec<_>>>()?;
        let mut sessions = Vec::with_capacity(n_train + n_test);
        for _ in 0..n_train + n_test {
            let original_id = read_str(&mut r)?;
            let mut ts = [0u8; 8];
            r.read_exact(&mut ts)?;
            let len = read_u32(&mut r)? as usize;
            let items = (0..len)
                .map(|_| read_u32(&mut r).map(|v| v as usize))
                .collect::<Result<Vec<_>>>()?;
            sessions.push(Session {
                original_id,
                items,
                last_timestamp: i64::from_le_bytes(ts),
            });
        }
        let test = sessions.split_off(n_train);
        Self::from_sessions(vocab, sessions, test)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct CorpusSummary {
    pub n_items: usize,
    pub train_sessions: usize,
    pub test_sessions: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub average_length: f64,
}

impl std::fmt::Display for CorpusSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "items: {}\ntrain sessions: {}\ntest sessions: {}\ntrain samples: {}\ntest samples: {}\naverage length: {:.2}",
            self.n_items,
            self.train_sessions,
            self.test_sessions,
            self.train_samples,
            self.test_samples,
            self.average_length
        )
    }
}

/// Options for the whole preprocessing pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct PrepareOptions {
    pub min_session_len: usize,
    pub min_item_freq: usize,
    pub boundary: SplitBoundary,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        PrepareOptions {
            min_session_len: 2,
            min_item_freq: 5,
            boundary: SplitBoundary::Fraction(0.1),
        }
    }
}

pub fn prepare(events: &[RawEvent], opts: &PrepareOptions) -> Result<SessionCorpus> {
    let sessions = build_sessions(events);
    let sessions = filter_corpus(sessions, opts.min_session_len, opts.min_item_freq)?;
    let (train, test) = temporal_split(sessions, opts.boundary)?;
    SessionCorpus::from_split(train, test)
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Format("string is not utf-8".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(s: &str, i: &str, t: i64) -> RawEvent {
        RawEvent {
            session_id: s.into(),
            item_id: i.into(),
            timestamp: t,
        }
    }

    fn raw(id: &str, items: &[&str], ts: i64) -> RawSession {
        RawSession {
            id: id.into(),
            items: items.iter().map(|s| s.to_string()).collect(),
            last_timestamp: ts,
        }
    }

    #[test]
    fn parses_file_with_header() {
        let text = "session,item,ts\ns1,a,10\ns1,b,5\ns2,a,7\n";
        let evs = read_events(text.as_bytes(), &EventFormat::default()).unwrap();
        assert_eq!(evs.len(), 3);
        assert_eq!(evs[1], ev("s1", "b", 5));
    }

    #[test]
    fn malformed_timestamp_names_its_line() {
        let text = "session,item,ts\ns1,a,10\ns1,b,yesterday\n";
        match read_events(text.as_bytes(), &EventFormat::default()) {
            Err(Error::MalformedRecord { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("yesterday"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_input_is_an_error() {
        let res = read_events("session,item,ts\n".as_bytes(), &EventFormat::default());
        assert!(matches!(res, Err(Error::EmptyInput)));
    }

    #[test]
    fn custom_delimiter_and_columns() {
        let fmt = EventFormat {
            delimiter: b';',
            session_col: 2,
            item_col: 0,
            time_col: 1,
            has_header: false,
        };
        let evs = read_events("x;3;s9\n".as_bytes(), &fmt).unwrap();
        assert_eq!(evs, vec![ev("s9", "x", 3)]);
    }

    #[test]
    fn sessions_sorted_by_time_with_stable_ties() {
        let s = build_sessions(&[ev("s1", "a", 10), ev("s1", "b", 5)]);
        assert_eq!(s[0].items, vec!["b", "a"]);
        let s = build_sessions(&[ev("s1", "x", 5), ev("s1", "y", 5), ev("s1", "z", 1)]);
        assert_eq!(s[0].items, vec!["z", "x", "y"]);
        assert_eq!(s[0].last_timestamp, 5);
        let s = build_sessions(&[ev("s", "a", 1)]);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].items.len(), 1);
    }

    #[test]
    fn length_one_sessions_are_removed() {
        let mut sessions = vec![raw("lone", &["a"], 0)];
        for i in 0..5 {
            sessions.push(raw(&format!("s{i}"), &["a", "b"], i));
        }
        let out = filter_corpus(sessions, 2, 5).unwrap();
        assert_eq!(out.len(), 5);
        assert!(out.iter().all(|s| s.id != "lone"));
    }

    #[test]
    fn rare_items_are_removed_everywhere() {
        let mut sessions = Vec::new();
        for i in 0..5 {
            let items: &[&str] = if i < 4 { &["a", "b", "r"] } else { &["a", "b"] };
            sessions.push(raw(&format!("s{i}"), items, i));
        }
        let out = filter_corpus(sessions, 2, 5).unwrap();
        assert!(out.iter().all(|s| !s.items.contains(&"r".to_string())));
    }

    #[test]
    fn everything_filtered_is_an_error() {
        assert!(matches!(
            filter_corpus(vec![raw("s", &["a", "b"], 0)], 2, 5),
            Err(Error::EmptyCorpus(_))
        ));
    }

    #[test]
    fn boundary_after_all_data_leaves_no_test() {
        let sessions = vec![raw("s1", &["a", "b"], 1), raw("s2", &["a", "b"], 2)];
        assert!(matches!(
            temporal_split(sessions, SplitBoundary::Timestamp(100)),
            Err(Error::EmptyCorpus(_))
        ));
    }

    #[test]
    fn unknown_test_items_are_dropped() {
        let sessions = vec![
            raw("s1", &["a", "b", "c"], 1),
            raw("s2", &["a", "z", "b"], 10),
            raw("s3", &["z", "a"], 11),
        ];
        let (train, test) = temporal_split(sessions, SplitBoundary::Timestamp(10)).unwrap();
        assert_eq!(train.len(), 1);
        assert_eq!(test.len(), 1);
        assert_eq!(test[0].items, vec!["a", "b"]);
    }

    #[test]
    fn sequence_split_examples() {
        let s = sequence_split(&[0, 1, 2, 3]).unwrap();
        assert_eq!(
            s,
            vec![(vec![0], 1), (vec![0, 1], 2), (vec![0, 1, 2], 3)]
        );
        assert_eq!(sequence_split(&[4, 5]).unwrap(), vec![(vec![4], 5)]);
        assert!(sequence_split(&[4]).is_err());
    }

    #[test]
    fn corpus_file_round_trip() {
        let train = vec![raw("s1", &["a", "b", "c"], 1), raw("s2", &["c", "a"], 2)];
        let test = vec![raw("s3", &["b", "c"], 3)];
        let corpus = SessionCorpus::from_split(train, test).unwrap();
        assert_eq!(corpus.item_vocab, vec!["a", "b", "c"]);
        assert_eq!(corpus.test_sessions[0].items, vec![1, 2]);
        let mut buf = Vec::new();
        corpus.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"CTRC");
        let back = SessionCorpus::read_from(&buf[..]).unwrap();
        assert_eq!(back, corpus);
        assert_eq!(back.train_samples.len(), 3);
    }
}
