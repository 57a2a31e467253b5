//! ULID-backed, prefix-tagged identifiers.

use std::sync::OnceLock;
use std::time::{SystemTime, UNIX_EPOCH};

use parking_lot::Mutex;
use ulid::Generator;

use lcm_model::{FileId, JobId, MessageId, SessionId, SummaryId};

fn generator() -> &'static Mutex<Generator> {
    static GEN: OnceLock<Mutex<Generator>> = OnceLock::new();
    GEN.get_or_init(|| Mutex::new(Generator::new()))
}

fn next(prefix: &str) -> String {
    let mut gen = generator().lock();
    let ulid = loop {
        // Overflow only happens after 2^80 ids in one millisecond.
        if let Ok(u) = gen.generate() {
            break u;
        }
    };
    format!("{prefix}{}", ulid.to_string().to_lowercase())
}

pub fn message_id() -> MessageId {
    MessageId(next(MessageId::PREFIX))
}

pub fn summary_id() -> SummaryId {
    SummaryId(next(SummaryId::PREFIX))
}

pub fn file_id() -> FileId {
    FileId(next(FileId::PREFIX))
}

pub fn session_id() -> SessionId {
    SessionId(next(SessionId::PREFIX))
}

pub fn job_id() -> JobId {
    JobId(next(JobId::PREFIX))
}

pub fn claim_token() -> String {
    next("clm_")
}

pub fn now_ms() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as i64)
        .unwrap_or(0)
}
