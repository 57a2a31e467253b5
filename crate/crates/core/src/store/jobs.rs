//! Map-job and map-item persistence with compare-and-set claiming.

use rusqlite::{params, Connection, OptionalExtension, Row};
use serde_json::Value;

use lcm_model::{ItemState, JobId, JobStatus, MapItem, MapJob, MapMode, SessionId};

use super::{parse_enum, session_row, Store};
use crate::error::{LcmError, Result};
use crate::ids;

#[derive(Debug, Clone)]
pub struct NewMapJob {
    pub mode: MapMode,
    pub input_path: String,
    pub output_path: String,
    pub prompt: String,
    pub output_schema: Value,
    pub concurrency: u32,
    pub retry_limit: u32,
    pub read_only: bool,
    pub parent_session: Option<SessionId>,
}

/// An item held under a live claim.
#[derive(Debug, Clone, PartialEq)]
pub struct ClaimedItem {
    pub item: MapItem,
    pub claim_token: String,
}

fn map_job_row(r: &Row<'_>) -> rusqlite::Result<MapJob> {
    let schema: String = r.get(5)?;
    Ok(MapJob {
        id: JobId(r.get(0)?),
        mode: parse_enum(1, r.get(1)?)?,
        input_path: r.get(2)?,
        output_path: r.get(3)?,
        prompt: r.get(4)?,
        output_schema: serde_json::from_str(&schema).map_err(|e| {
            rusqlite::Error::FromSqlConversionFailure(5, rusqlite::types::Type::Text, Box::new(e))
        })?,
        concurrency: r.get::<_, i64>(6)? as u32,
        retry_limit: r.get::<_, i64>(7)? as u32,
        read_only: r.get::<_, i64>(8)? != 0,
        status: parse_enum(9, r.get(9)?)?,
        parent_session: r.get::<_, Option<String>>(10)?.map(SessionId),
        item_count: r.get::<_, i64>(11)? as u64,
    })
}

const ITEM_COLUMNS: &str = "job_id, idx, input, state, attempts, output, error, claim_token";

fn json_col(idx: usize, raw: Option<String>) -> rusqlite::Result<Option<Value>> {
    raw.map(|s| {
        serde_json::from_str(&s).map_err(|e| {
            rusqlite::Error::FromSqlConversionFailure(idx, rusqlite::types::Type::Text, Box::new(e))
        })
    })
    .transpose()
}

fn map_item_row(r: &Row<'_>) -> rusqlite::Result<MapItem> {
    Ok(MapItem {
        job_id: JobId(r.get(0)?),
        index: r.get::<_, i64>(1)? as u64,
        input: json_col(2, Some(r.get(2)?))?.unwrap_or(Value::Null),
        state: parse_enum(3, r.get(3)?)?,
        attempts: r.get::<_, i64>(4)? as u32,
        output: json_col(5, r.get(5)?)?,
        error: r.get(6)?,
        claim_token: r.get(7)?,
    })
}

fn job_row(c: &Connection, id: &JobId) -> Result<MapJob> {
    c.query_row(
        "SELECT id, mode, input_path, output_path, prompt, output_schema, concurrency, retry_limit,
                read_only, status, parent_session, item_count
         FROM map_jobs WHERE id = ?1",
        [id.as_str()],
        map_job_row,
    )
    .optional()?
    .ok_or_else(|| LcmError::NotFound(format!("map job {id}")))
}

impl Store {
    /// Persists a job and one pending item per input, in one transaction.
    pub fn create_map_job(&self, job: NewMapJob, inputs: &[Value]) -> Result<MapJob> {
        if job.concurrency == 0 || job.retry_limit == 0 {
            return Err(LcmError::Invalid(
                "concurrency and retry_limit must be at least 1".into(),
            ));
        }
        let id = ids::job_id();
        let schema = serde_json::to_string(&job.output_schema)?;
        self.write(|tx| {
            if let Some(parent) = &job.parent_session {
                session_row(tx, parent)?;
            }
            tx.execute(
                "INSERT INTO map_jobs (id, mode, input_path, output_path, prompt, output_schema,
                    concurrency, retry_limit, read_only, status, parent_session, item_count, created_at)
                 VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9, 'created', ?10, ?11, ?12)",
                params![
                    id.as_str(),
                    job.mode.as_str(),
                    job.input_path,
                    job.output_path,
                    job.prompt,
                    schema,
                    job.concurrency as i64,
                    job.retry_limit as i64,
                    job.read_only as i64,
                    job.parent_session.as_ref().map(|s| s.as_str()),
                    inputs.len() as i64,
                    ids::now_ms()
                ],
            )?;
            let mut stmt = tx.prepare_cached(
                "INSERT INTO map_items (job_id, idx, input, state) VALUES (?1, ?2, ?3, 'pending')",
            )?;
            for (i, input) in inputs.iter().enumerate() {
                stmt.execute(params![id.as_str(), i as i64, serde_json::to_string(input)?])?;
            }
            drop(stmt);
            job_row(tx, &id)
        })
    }

    pub fn map_job(&self, id: &JobId) -> Result<MapJob> {
        self.read(|c| job_row(c, id))
    }

    pub fn set_job_status(&self, id: &JobId, status: JobStatus) -> Result<()> {
        self.write(|tx| {
            let n = tx.execute(
                "UPDATE map_jobs SET status = ?2 WHERE id = ?1",
                params![id.as_str(), status.as_str()],
            )?;
            if n == 0 {
                return Err(LcmError::NotFound(format!("map job {id}")));
            }
            Ok(())
        })
    }

    /// Claims the lowest pending item (or one whose lease expired) by
    /// compare-and-set. `None` means no claimable work.
    pub fn claim_item(&self, job: &JobId, lease_ms: i64) -> Result<Option<ClaimedItem>> {
        let token = ids::claim_token();
        let now = ids::now_ms();
        self.write(|tx| {
            let item = tx
                .query_row(
                    &format!(
                        "UPDATE map_items SET state = 'running', claim_token = ?2, claimed_at = ?3
                         WHERE job_id = ?1 AND idx = (
                             SELECT idx FROM map_items
                             WHERE job_id = ?1 AND (state = 'pending'
                                   OR (state = 'running' AND claimed_at <= ?3 - ?4))
                             ORDER BY idx LIMIT 1)
                         RETURNING {ITEM_COLUMNS}"
                    ),
                    params![job.as_str(), token, now, lease_ms],
                    map_item_row,
                )
                .optional()?;
            Ok(item.map(|item| ClaimedItem {
                item,
                claim_token: token.clone(),
            }))
        })
    }

    /// Counts one attempt against a claimed item. Fails if the claim was lost
    /// or the retry budget is exhausted.
    pub fn begin_attempt(&self, job: &JobId, index: u64, token: &str, retry_limit: u32) -> Result<u32> {
        self.write(|tx| {
            let attempts: Option<i64> = tx
                .query_row(
                    "UPDATE map_items SET attempts = attempts + 1
                     WHERE job_id = ?1 AND idx = ?2 AND claim_token = ?3 AND state = 'running'
                           AND attempts < ?4
                     RETURNING attempts",
                    params![job.as_str(), index as i64, token, retry_limit as i64],
                    |r| r.get(0),
                )
                .optional()?;
            attempts.map(|a| a as u32).ok_or_else(|| {
                LcmError::Integrity(format!("claim on {job}#{index} lost or budget exhausted"))
            })
        })
    }

    /// Records the final outcome of a claimed item.
    pub fn finish_item(
        &self,
        job: &JobId,
        index: u64,
        token: &str,
        outcome: std::result::Result<&Value, &str>,
    ) -> Result<()> {
        let (state, output, error) = match outcome {
            Ok(v) => (ItemState::Ok, Some(serde_json::to_string(v)?), None),
            Err(e) => (ItemState::Error, None, Some(e.to_string())),
        };
        self.write(|tx| {
            let n = tx.execute(
                "UPDATE map_items SET state = ?4, output = ?5, error = ?6, claim_token = NULL
                 WHERE job_id = ?1 AND idx = ?2 AND claim_token = ?3 AND state = 'running'",
                params![job.as_str(), index as i64, token, state.as_str(), output, error],
            )?;
            if n == 0 {
                return Err(LcmError::Integrity(format!("claim on {job}#{index} lost")));
            }
            Ok(())
        })
    }

    /// Returns a claimed item to pending without touching its attempts.
    pub fn release_claim(&self, job: &JobId, index: u64, token: &str) -> Result<()> {
        self.write(|tx| {
            tx.execute(
                "UPDATE map_items SET state = 'pending', claim_token = NULL, claimed_at = NULL
                 WHERE job_id = ?1 AND idx = ?2 AND claim_token = ?3 AND state = 'running'",
                params![job.as_str(), index as i64, token],
            )?;
            Ok(())
        })
    }

    pub fn append_item_message(&self, job: &JobId, index: u64, role: &str, content: &str) -> Result<()> {
        self.write(|tx| {
            tx.execute(
                "INSERT INTO map_item_messages (job_id, idx, pos, role, content)
                 VALUES (?1, ?2,
                    (SELECT COALESCE(MAX(pos), -1) + 1 FROM map_item_messages WHERE job_id = ?1 AND idx = ?2),
                    ?3, ?4)",
                params![job.as_str(), index as i64, role, content],
            )?;
            Ok(())
        })
    }

    /// `(role, content)` pairs of one item's conversation, in order.
    pub fn item_conversation(&self, job: &JobId, index: u64) -> Result<Vec<(String, String)>> {
        self.read(|c| {
            let mut stmt = c.prepare_cached(
                "SELECT role, content FROM map_item_messages WHERE job_id = ?1 AND idx = ?2 ORDER BY pos",
            )?;
            let rows = stmt.query_map(params![job.as_str(), index as i64], |r| {
                Ok((r.get(0)?, r.get(1)?))
            })?;
            Ok(rows.collect::<rusqlite::Result<_>>()?)
        })
    }

    pub fn map_items(&self, job: &JobId) -> Result<Vec<MapItem>> {
        self.read(|c| {
            let mut stmt = c.prepare_cached(&format!(
                "SELECT {ITEM_COLUMNS} FROM map_items WHERE job_id = ?1 ORDER BY idx"
            ))?;
            let rows = stmt.query_map([job.as_str()], map_item_row)?;
            Ok(rows.collect::<rusqlite::Result<_>>()?)
        })
    }

    pub fn map_item(&self, job: &JobId, index: u64) -> Result<MapItem> {
        self.read(|c| {
            c.query_row(
                &format!("SELECT {ITEM_COLUMNS} FROM map_items WHERE job_id = ?1 AND idx = ?2"),
                params![job.as_str(), index as i64],
                map_item_row,
            )
            .optional()?
            .ok_or_else(|| LcmError::NotFound(format!("map item {job}#{index}")))
        })
    }

    /// Number of items not yet in a terminal state.
    pub fn unfinished_items(&self, job: &JobId) -> Result<u64> {
        self.read(|c| {
            let n: i64 = c.query_row(
                "SELECT COUNT(*) FROM map_items WHERE job_id = ?1 AND state IN ('pending', 'running')",
                [job.as_str()],
                |r| r.get(0),
            )?;
            Ok(n as u64)
        })
    }
}
