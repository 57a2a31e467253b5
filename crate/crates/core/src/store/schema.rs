pub(super) const SCHEMA: &str = r#"
CREATE TABLE IF NOT EXISTS sessions (
    ord         INTEGER PRIMARY KEY AUTOINCREMENT,
    id          TEXT NOT NULL UNIQUE,
    parent_id   TEXT REFERENCES sessions(id),
    depth       INTEGER NOT NULL,
    agent_kind  TEXT NOT NULL CHECK (agent_kind IN ('root', 'general', 'read_only_explorer', 'map_item')),
    turn_count  INTEGER NOT NULL DEFAULT 0,
    created_at  INTEGER NOT NULL
);

CREATE TABLE IF NOT EXISTS messages (
    id          TEXT PRIMARY KEY,
    session_id  TEXT NOT NULL REFERENCES sessions(id),
    seq         INTEGER NOT NULL,
    role        TEXT NOT NULL CHECK (role IN ('user', 'assistant', 'tool')),
    content     TEXT NOT NULL,
    token_count INTEGER NOT NULL,
    created_at  INTEGER NOT NULL,
    UNIQUE (session_id, seq)
);

CREATE TABLE IF NOT EXISTS files (
    id                  TEXT PRIMARY KEY,
    session_id          TEXT REFERENCES sessions(id),
    path                TEXT NOT NULL,
    mime_kind           TEXT NOT NULL,
    token_count         INTEGER NOT NULL,
    exploration_summary TEXT NOT NULL,
    content_hash        TEXT NOT NULL,
    first_seen_message  TEXT REFERENCES messages(id),
    created_at          INTEGER NOT NULL
);

CREATE TABLE IF NOT EXISTS message_files (
    message_id  TEXT NOT NULL REFERENCES messages(id),
    pos         INTEGER NOT NULL,
    file_id     TEXT NOT NULL REFERENCES files(id),
    PRIMARY KEY (message_id, pos)
);
CREATE INDEX IF NOT EXISTS message_files_by_file ON message_files(file_id);

CREATE TABLE IF NOT EXISTS summaries (
    ord         INTEGER PRIMARY KEY AUTOINCREMENT,
    id          TEXT NOT NULL UNIQUE,
    session_id  TEXT NOT NULL REFERENCES sessions(id),
    kind        TEXT NOT NULL CHECK (kind IN ('leaf', 'condensed')),
    text        TEXT NOT NULL,
    token_count INTEGER NOT NULL,
    lo_seq      INTEGER NOT NULL,
    hi_seq      INTEGER NOT NULL,
    level_used  TEXT NOT NULL CHECK (level_used IN ('normal', 'aggressive', 'truncate')),
    created_at  INTEGER NOT NULL
);
CREATE INDEX IF NOT EXISTS summaries_by_session ON summaries(session_id);

CREATE TABLE IF NOT EXISTS summary_children (
    parent_id   TEXT NOT NULL REFERENCES summaries(id),
    pos         INTEGER NOT NULL,
    child_id    TEXT NOT NULL REFERENCES summaries(id),
    PRIMARY KEY (parent_id, pos)
);
CREATE INDEX IF NOT EXISTS summary_children_by_child ON summary_children(child_id);

CREATE TABLE IF NOT EXISTS summary_files (
    summary_id  TEXT NOT NULL REFERENCES summaries(id),
    pos         INTEGER NOT NULL,
    file_id     TEXT NOT NULL REFERENCES files(id),
    PRIMARY KEY (summary_id, pos)
);

CREATE TABLE IF NOT EXISTS context_entries (
    session_id  TEXT NOT NULL REFERENCES sessions(id),
    pos         INTEGER NOT NULL,
    kind        TEXT NOT NULL,
    ref_id      TEXT NOT NULL,
    token_count INTEGER NOT NULL,
    lo_seq      INTEGER NOT NULL,
    hi_seq      INTEGER NOT NULL,
    PRIMARY KEY (session_id, pos)
);

CREATE TABLE IF NOT EXISTS map_jobs (
    id              TEXT PRIMARY KEY,
    mode            TEXT NOT NULL CHECK (mode IN ('llm', 'agentic')),
    input_path      TEXT NOT NULL,
    output_path     TEXT NOT NULL,
    prompt          TEXT NOT NULL,
    output_schema   TEXT NOT NULL,
    concurrency     INTEGER NOT NULL CHECK (concurrency >= 1),
    retry_limit     INTEGER NOT NULL CHECK (retry_limit >= 1),
    read_only       INTEGER NOT NULL,
    status          TEXT NOT NULL CHECK (status IN ('created', 'running', 'completed')),
    parent_session  TEXT REFERENCES sessions(id),
    item_count      INTEGER NOT NULL,
    created_at      INTEGER NOT NULL
);

CREATE TABLE IF NOT EXISTS map_items (
    job_id      TEXT NOT NULL REFERENCES map_jobs(id),
    idx         INTEGER NOT NULL,
    input       TEXT NOT NULL,
    state       TEXT NOT NULL CHECK (state IN ('pending', 'running', 'ok', 'error')),
    attempts    INTEGER NOT NULL DEFAULT 0,
    output      TEXT,
    error       TEXT,
    claim_token TEXT,
    claimed_at  INTEGER,
    PRIMARY KEY (job_id, idx)
);
CREATE INDEX IF NOT EXISTS map_items_by_state ON map_items(job_id, state);

CREATE TABLE IF NOT EXISTS map_item_messages (
    job_id      TEXT NOT NULL,
    idx         INTEGER NOT NULL,
    pos         INTEGER NOT NULL,
    role        TEXT NOT NULL,
    content     TEXT NOT NULL,
    PRIMARY KEY (job_id, idx, pos),
    FOREIGN KEY (job_id, idx) REFERENCES map_items(job_id, idx)
);

CREATE TRIGGER IF NOT EXISTS messages_immutable_update BEFORE UPDATE ON messages
BEGIN SELECT RAISE(ABORT, 'messages are immutable'); END;
CREATE TRIGGER IF NOT EXISTS messages_immutable_delete BEFORE DELETE ON messages
BEGIN SELECT RAISE(ABORT, 'messages are immutable'); END;
CREATE TRIGGER IF NOT EXISTS message_files_immutable_update BEFORE UPDATE ON message_files
BEGIN SELECT RAISE(ABORT, 'messages are immutable'); END;
CREATE TRIGGER IF NOT EXISTS message_files_immutable_delete BEFORE DELETE ON message_files
BEGIN SELECT RAISE(ABORT, 'messages are immutable'); END;
CREATE TRIGGER IF NOT EXISTS summaries_immutable_update BEFORE UPDATE ON summaries
BEGIN SELECT RAISE(ABORT, 'summary nodes are immutable'); END;
CREATE TRIGGER IF NOT EXISTS summaries_immutable_delete BEFORE DELETE ON summaries
BEGIN SELECT RAISE(ABORT, 'summary nodes are immutable'); END;
CREATE TRIGGER IF NOT EXISTS summary_children_immutable_update BEFORE UPDATE ON summary_children
BEGIN SELECT RAISE(ABORT, 'summary nodes are immutable'); END;
CREATE TRIGGER IF NOT EXISTS summary_children_immutable_delete BEFORE DELETE ON summary_children
BEGIN SELECT RAISE(ABORT, 'summary nodes are immutable'); END;
"#;
