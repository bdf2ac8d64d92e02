//! Message queues standing in for the relay service between the coordinator
//! and the data holders, plus the privacy scanner for outbound node messages.

use crate::error::{FederationError, TransportError};
use crate::message::{ErrorReport, Message, MessageKind};
use std::collections::{HashMap, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

pub const COORDINATOR: &str = "coordinator";
pub const IN_PROCESS_POLL: Duration = Duration::from_millis(50);
pub const FILE_POLL: Duration = Duration::from_millis(500);

/// A relay every endpoint can push to and fetch its own messages from.
pub trait Channel: Send + Sync {
    /// Validates and enqueues a message for its recipient.
    fn push(&self, msg: &Message) -> Result<(), TransportError>;
    /// Removes and returns everything queued for `recipient`, waiting up to
    /// `wait` for at least one message. Fails with `Closed` once the channel
    /// is closed and nothing is left.
    fn fetch(&self, recipient: &str, wait: Duration) -> Result<Vec<Message>, TransportError>;
    fn close(&self);
    fn is_closed(&self) -> bool;
    fn poll_interval(&self) -> Duration;
}

pub fn check_name(name: &str) -> Result<(), TransportError> {
    let ok = !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
    if ok {
        Ok(())
    } else {
        Err(TransportError::BadName(name.to_string()))
    }
}

/// Last round seen per (sender, recipient); equal rounds are duplicates,
/// smaller rounds are rejected.
#[derive(Debug, Default)]
struct RoundTracker(HashMap<(String, String), u64>);

impl RoundTracker {
    fn admit(&mut self, msg: &Message) -> Result<(), TransportError> {
        let key = (msg.sender.clone(), msg.recipient.clone());
        match self.0.get(&key) {
            Some(&last) if msg.round < last => Err(TransportError::RoundRegression {
                sender: msg.sender.clone(),
                recipient: msg.recipient.clone(),
                last,
                got: msg.round,
            }),
            _ => {
                self.0.insert(key, msg.round);
                Ok(())
            }
        }
    }
}

fn prepare(msg: &Message) -> Result<Message, TransportError> {
    check_name(&msg.sender)?;
    check_name(&msg.recipient)?;
    // Non-finite plain numbers become JSON null and fail here.
    msg.validate_schema()?;
    Ok(msg.clone())
}

#[derive(Debug, Default)]
struct Queues {
    queues: HashMap<String, VecDeque<Message>>,
    rounds: RoundTracker,
    log: Option<Vec<Message>>,
    closed: bool,
}

/// Shared-memory channel: one FIFO queue per recipient.
#[derive(Debug, Default)]
pub struct InProcessChannel {
    state: Mutex<Queues>,
    ready: Condvar,
}

impl InProcessChannel {
    pub fn new() -> Self {
        Self::default()
    }

    /// A channel that also keeps a copy of every delivered message.
    pub fn with_log() -> Self {
        let ch = Self::default();
        ch.lock().log = Some(Vec::new());
        ch
    }

    fn lock(&self) -> MutexGuard<'_, Queues> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn log(&self) -> Vec<Message> {
        self.lock().log.clone().unwrap_or_default()
    }
}

impl Channel for InProcessChannel {
    fn push(&self, msg: &Message) -> Result<(), TransportError> {
        let msg = prepare(msg)?;
        let mut st = self.lock();
        if st.closed {
            return Err(TransportError::Closed);
        }
        st.rounds.admit(&msg)?;
        if let Some(log) = st.log.as_mut() {
            log.push(msg.clone());
        }
        st.queues.entry(msg.recipient.clone()).or_default().push_back(msg);
        drop(st);
        self.ready.notify_all();
        Ok(())
    }

    fn fetch(&self, recipient: &str, wait: Duration) -> Result<Vec<Message>, TransportError> {
        let st = self.lock();
        let (mut st, _) = self
            .ready
            .wait_timeout_while(st, wait, |s| !s.closed && s.queues.get(recipient).is_none_or(VecDeque::is_empty))
            .unwrap_or_else(|e| e.into_inner());
        let out: Vec<Message> = st.queues.get_mut(recipient).map(|q| q.drain(..).collect()).unwrap_or_default();
        if out.is_empty() && st.closed {
            return Err(TransportError::Closed);
        }
        Ok(out)
    }

    fn close(&self) {
        self.lock().closed = true;
        self.ready.notify_all();
    }

    fn is_closed(&self) -> bool {
        self.lock().closed
    }

    fn poll_interval(&self) -> Duration {
        IN_PROCESS_POLL
    }
}

/// Directory-backed channel. A message from `s` to `r` of kind `K` is the file
/// `root/to_r/s/K/<round>_<seq>.json`, published by atomic rename; readers
/// delete what they have read. A `CLOSED` file in `root` closes the channel.
#[derive(Debug)]
pub struct FileChannel {
    root: PathBuf,
    seq: AtomicU64,
    rounds: Mutex<RoundTracker>,
    poll: Duration,
}

impl FileChannel {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self, TransportError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root, seq: AtomicU64::new(0), rounds: Mutex::default(), poll: FILE_POLL })
    }

    pub fn with_poll(mut self, poll: Duration) -> Self {
        self.poll = poll;
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn inbox(&self, recipient: &str) -> PathBuf {
        self.root.join(format!("to_{recipient}"))
    }

    fn read_inbox(&self, recipient: &str) -> Result<Vec<Message>, TransportError> {
        let inbox = self.inbox(recipient);
        if !inbox.exists() {
            return Ok(Vec::new());
        }
        let mut found: Vec<(u64, u64, PathBuf)> = Vec::new();
        for sender in fs::read_dir(&inbox)? {
            let sender = sender?.path();
            if !sender.is_dir() {
                continue;
            }
            for kind in fs::read_dir(&sender)? {
                let kind = kind?.path();
                if !kind.is_dir() {
                    continue;
                }
                for file in fs::read_dir(&kind)? {
                    let path = file?.path();
                    if path.extension().is_none_or(|e| e != "json") {
                        continue;
                    }
                    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
                    if let Some((r, s)) = stem.split_once('_') {
                        if let (Ok(r), Ok(s)) = (r.parse(), s.parse()) {
                            found.push((r, s, path));
                        }
                    }
                }
            }
        }
        found.sort();
        let mut out = Vec::with_capacity(found.len());
        for (_, _, path) in found {
            let text = fs::read_to_string(&path)?;
            let msg: Message = serde_json::from_str(&text)?;
            msg.validate_schema()?;
            fs::remove_file(&path)?;
            out.push(msg);
        }
        Ok(out)
    }
}

impl Channel for FileChannel {
    fn push(&self, msg: &Message) -> Result<(), TransportError> {
        let msg = prepare(msg)?;
        if self.is_closed() {
            return Err(TransportError::Closed);
        }
        self.rounds.lock().unwrap_or_else(|e| e.into_inner()).admit(&msg)?;
        let dir = self.inbox(&msg.recipient).join(&msg.sender).join(msg.kind.name());
        fs::create_dir_all(&dir)?;
        let text = serde_json::to_string(&msg)?;
        loop {
            let seq = self.seq.fetch_add(1, Ordering::SeqCst);
            let name = format!("{:012}_{:012}.json", msg.round, seq);
            let target = dir.join(&name);
            if target.exists() {
                continue;
            }
            let tmp = dir.join(format!(".{name}.tmp"));
            fs::write(&tmp, &text)?;
            fs::rename(&tmp, &target)?;
            return Ok(());
        }
    }

    fn fetch(&self, recipient: &str, wait: Duration) -> Result<Vec<Message>, TransportError> {
        let deadline = Instant::now() + wait;
        loop {
            let msgs = self.read_inbox(recipient)?;
            if !msgs.is_empty() {
                return Ok(msgs);
            }
            if self.is_closed() {
                return Err(TransportError::Closed);
            }
            let now = Instant::now();
            if now >= deadline {
                return Ok(Vec::new());
            }
            std::thread::sleep(self.poll.min(deadline - now));
        }
    }

    fn close(&self) {
        let _ = fs::write(self.root.join("CLOSED"), b"");
    }

    fn is_closed(&self) -> bool {
        self.root.join("CLOSED").exists()
    }

    fn poll_interval(&self) -> Duration {
        self.poll
    }
}

/// One endpoint's view of a channel, with a buffer for messages that arrived
/// before they were asked for.
pub struct Mailbox {
    channel: Arc<dyn Channel>,
    me: String,
    pending: VecDeque<Message>,
    duplicates: usize,
}

impl Mailbox {
    pub fn new(channel: Arc<dyn Channel>, me: &str) -> Result<Self, TransportError> {
        check_name(me)?;
        Ok(Self { channel, me: me.to_string(), pending: VecDeque::new(), duplicates: 0 })
    }

    pub fn name(&self) -> &str {
        &self.me
    }

    pub fn channel(&self) -> &Arc<dyn Channel> {
        &self.channel
    }

    /// Duplicate messages superseded so far.
    pub fn duplicates(&self) -> usize {
        self.duplicates
    }

    pub fn send(&self, msg: &Message) -> Result<(), TransportError> {
        self.channel.push(msg)
    }

    fn pull(&mut self, wait: Duration) -> Result<(), TransportError> {
        let msgs = self.channel.fetch(&self.me, wait)?;
        self.pending.extend(msgs);
        Ok(())
    }

    /// Next message addressed to this endpoint, or `None` after `timeout`.
    pub fn next_message(&mut self, timeout: Duration) -> Result<Option<Message>, TransportError> {
        if self.pending.is_empty() {
            self.pull(timeout)?;
        }
        Ok(self.pending.pop_front())
    }

    /// Waits for one `kind` message of `round` from each of `senders` and
    /// returns them in `senders` order. A repeated message replaces the
    /// earlier one; messages from older rounds are discarded. An error report
    /// from an expected sender aborts the wait.
    pub fn await_all(
        &mut self,
        senders: &[String],
        kind: MessageKind,
        round: u64,
        timeout: Duration,
    ) -> Result<Vec<Message>, FederationError> {
        if senders.is_empty() {
            return Err(FederationError::Protocol("await_all needs at least one sender".into()));
        }
        let deadline = Instant::now() + timeout;
        let mut got: HashMap<String, Message> = HashMap::new();
        loop {
            let mut keep = VecDeque::new();
            while let Some(msg) = self.pending.pop_front() {
                if !senders.contains(&msg.sender) {
                    keep.push_back(msg);
                    continue;
                }
                if msg.kind == MessageKind::ErrorReport {
                    let report: ErrorReport = msg.decode()?;
                    return Err(FederationError::Centre {
                        centre: msg.sender,
                        category: report.category,
                        message: report.message,
                    });
                }
                if msg.kind != kind || msg.round > round {
                    keep.push_back(msg);
                } else if msg.round == round {
                    if got.insert(msg.sender.clone(), msg).is_some() {
                        self.duplicates += 1;
                    }
                } else {
                    log::debug!("dropping stale {:?} round {} from {}", msg.kind, msg.round, msg.sender);
                }
            }
            self.pending = keep;
            if senders.iter().all(|s| got.contains_key(s)) {
                return Ok(senders.iter().map(|s| got.remove(s).expect("present")).collect());
            }
            let now = Instant::now();
            if now >= deadline {
                let missing = senders.iter().filter(|s| !got.contains_key(*s)).cloned().collect();
                return Err(TransportError::Timeout { kind, round, missing }.into());
            }
            match self.pull((deadline - now).min(self.channel.poll_interval())) {
                Ok(()) => {}
                Err(TransportError::Closed) => return Err(TransportError::Closed.into()),
                Err(e) => return Err(e.into()),
            }
        }
    }
}

const FORBIDDEN_KEYS: [&str; 8] = ["risk_set", "tied_", "event_times", "times", "events", "theta", "ids", "covariates"];

fn forbidden(key: &str) -> bool {
    FORBIDDEN_KEYS.iter().any(|f| {
        if f.ends_with('_') {
            key.starts_with(f)
        } else {
            key == *f || key.starts_with(&format!("{f}_"))
        }
    })
}

fn is_scalar(v: &serde_json::Value) -> bool {
    v.is_number() || v.as_str().is_some_and(|s| crate::hexfloat::decode(s).is_some())
}

/// Scans a node-to-coordinator message for patient-level content: arrays of
/// `n_local` scalars, per-event denominator fields, curve knots covering fewer
/// than `min_patients`, and Hessians not shaped like their gradient. Messages
/// the coordinator sends are not scanned. Returns a description per violation.
pub fn validate_privacy(msg: &Message, n_local: usize, min_patients: usize) -> Vec<String> {
    let mut out = Vec::new();
    match msg.kind {
        MessageKind::EvaluateResponse | MessageKind::PerformanceResponse | MessageKind::ErrorReport => {}
        _ => return out,
    }
    walk(&msg.payload, &mut Vec::new(), n_local, min_patients, &mut out);
    out
}

enum Step<'a> {
    Key(&'a str),
    Index(usize),
}

fn render(path: &[Step]) -> String {
    let mut s = String::from("$");
    for step in path {
        match step {
            Step::Key(k) => {
                s.push('.');
                s.push_str(k);
            }
            Step::Index(i) => s.push_str(&format!("[{i}]")),
        }
    }
    s
}

fn walk<'a>(v: &'a serde_json::Value, path: &mut Vec<Step<'a>>, n: usize, min: usize, out: &mut Vec<String>) {
    use serde_json::Value;
    match v {
        Value::Array(items) => {
            if n > 0 && items.len() == n && items.iter().all(is_scalar) {
                out.push(format!("{}: array of {n} values, one per local patient", render(path)));
            }
            for (i, item) in items.iter().enumerate() {
                path.push(Step::Index(i));
                walk(item, path, n, min, out);
                path.pop();
            }
        }
        Value::Object(map) => {
            for (key, val) in map {
                path.push(Step::Key(key));
                if forbidden(key) {
                    out.push(format!("{}: per-patient or per-event field", render(path)));
                }
                if key == "n_patients" {
                    let counts: Vec<u64> = match val {
                        Value::Array(a) => a.iter().filter_map(Value::as_u64).collect(),
                        other => other.as_u64().into_iter().collect(),
                    };
                    if let Some(c) = counts.iter().find(|c| (**c as usize) < min) {
                        out.push(format!("{}: knot covers {c} patients, fewer than {min}", render(path)));
                    }
                }
                walk(val, path, n, min, out);
                path.pop();
            }
            if let (Some(Value::Array(g)), Some(Value::Array(h))) = (map.get("gradient"), map.get("hessian")) {
                let p = g.len();
                let square = h.len() == p && h.iter().all(|r| r.as_array().is_some_and(|r| r.len() == p));
                if !square {
                    out.push(format!("{}: hessian is not {p} x {p}", render(path)));
                }
            }
        }
        _ => {}
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::ErrorCategory;

    fn report(sender: &str, round: u64, text: &str) -> Message {
        let r = ErrorReport { category: ErrorCategory::Data, message: text.into() };
        Message::new(MessageKind::ErrorReport, sender, COORDINATOR, round, &r).unwrap()
    }

    #[test]
    fn names_are_restricted() {
        assert!(check_name("centre_1-a").is_ok());
        for bad in ["", "a/b", "..", "x y"] {
            assert!(check_name(bad).is_err());
        }
    }

    #[test]
    fn fifo_and_round_regression() {
        let ch = InProcessChannel::new();
        ch.push(&report("n1", 2, "a")).unwrap();
        ch.push(&report("n1", 2, "b")).unwrap();
        ch.push(&report("n1", 3, "c")).unwrap();
        let err = ch.push(&report("n1", 1, "d")).unwrap_err();
        assert!(matches!(err, TransportError::RoundRegression { last: 3, got: 1, .. }));
        let got = ch.fetch(COORDINATOR, Duration::ZERO).unwrap();
        let texts: Vec<String> = got.iter().map(|m| m.decode::<ErrorReport>().unwrap().message).collect();
        assert_eq!(texts, ["a", "b", "c"]);
    }

    #[test]
    fn closed_channel_drains_then_fails() {
        let ch = InProcessChannel::new();
        ch.push(&report("n1", 1, "a")).unwrap();
        ch.close();
        assert_eq!(ch.fetch(COORDINATOR, Duration::ZERO).unwrap().len(), 1);
        assert!(matches!(ch.fetch(COORDINATOR, Duration::ZERO), Err(TransportError::Closed)));
        assert!(matches!(ch.push(&report("n1", 2, "b")), Err(TransportError::Closed)));
    }

    #[test]
    fn forbidden_key_matching() {
        for k in ["risk_set_sums", "tied_first", "event_times", "times", "theta", "ids"] {
            assert!(forbidden(k), "{k}");
        }
        for k in ["gradient", "hessian", "knots", "n_patients", "time", "time_points"] {
            assert!(!forbidden(k), "{k}");
        }
    }
}
