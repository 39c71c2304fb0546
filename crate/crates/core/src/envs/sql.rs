//! Relational-database environment.
//!
//! Actions are SQL statements. Each one runs on an [`SqlEngine`] and its
//! result set becomes the observation; the latest result is scored against
//! the gold query's result on submit.
//!
//! Two engines ship. [`MysqlEngine`] (feature `mysql`) speaks the MySQL wire
//! protocol to a server, optionally one it provisions in a container.
//! [`SqliteEngine`] runs in-process over the same dump files and emulates the
//! MySQL statements agents lean on (`SHOW TABLES`, `DESC t`, `USE db`).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use regex::Regex;
use rusqlite::types::ValueRef;
use rusqlite::Connection;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::backend::Backend;
use crate::episode::{EnvError, Environment, ErrorClass, Execution, GoldPlan, Submission, TaskInstance};
use crate::scoring::{sql_reward, Cell, Record, ResultSet, RewardBreakdown};

pub const DEFAULT_IMAGE: &str = "execbench/sql:latest";
pub const READY_TIMEOUT: Duration = Duration::from_secs(120);

/// Dumps compiled into the binary, used when no dump directory is given.
pub const BUILTIN_DUMPS: [(&str, &str); 2] = [
    ("radio", include_str!("../../fixtures/sql/radio.sql")),
    ("school", include_str!("../../fixtures/sql/school.sql")),
];

const ERROR_PREFIX: &str = "Error executing query: ";

/// One statement's result.
#[derive(Debug, Clone, PartialEq)]
pub struct SqlOutcome {
    pub result: ResultSet,
    pub timed_out: bool,
}

impl SqlOutcome {
    fn ok(rows: Vec<Record>) -> Self {
        Self {
            result: ResultSet::rows(rows),
            timed_out: false,
        }
    }

    fn error(msg: impl std::fmt::Display) -> Self {
        Self {
            result: ResultSet::error(format!("{ERROR_PREFIX}{msg}")),
            timed_out: false,
        }
    }
}

/// A database the environment can run statements on. SQL errors come back
/// as non-tabular results; `Err` means the engine itself is unusable.
pub trait SqlEngine: Send {
    fn kind(&self) -> &'static str;
    fn databases(&mut self) -> Result<Vec<String>, EnvError>;
    fn current_database(&mut self) -> Result<Option<String>, EnvError>;
    fn use_database(&mut self, db: &str) -> Result<(), EnvError>;
    fn run(&mut self, statement: &str, timeout: Duration) -> Result<SqlOutcome, EnvError>;
    /// Undo data changes where the engine can. Called before every episode.
    fn restore(&mut self) -> Result<(), EnvError> {
        Ok(())
    }
    fn close(&mut self) -> Result<(), EnvError> {
        Ok(())
    }
}

/// Strip whitespace and trailing semicolons.
fn clean_statement(s: &str) -> &str {
    s.trim().trim_end_matches(|c: char| c == ';' || c.is_whitespace())
}

fn unquote_ident(s: &str) -> &str {
    let s = s.trim();
    for (a, b) in [('`', '`'), ('"', '"'), ('[', ']')] {
        if let Some(inner) = s.strip_prefix(a).and_then(|r| r.strip_suffix(b)) {
            return inner;
        }
    }
    s
}

/// True when `statement` writes data or schema.
pub fn is_mutating(statement: &str) -> bool {
    static WORDS: &[&str] = &[
        "insert", "update", "delete", "drop", "alter", "create", "replace", "truncate", "rename", "grant", "revoke",
    ];
    statement
        .split(';')
        .filter_map(|s| s.split_whitespace().next())
        .any(|w| WORDS.contains(&w.to_ascii_lowercase().as_str()))
}

// ---------------------------------------------------------------- sqlite

struct SqliteDb {
    dump: String,
    conn: Connection,
    dirty: bool,
}

/// In-process engine: one in-memory SQLite database per dump.
pub struct SqliteEngine {
    dbs: BTreeMap<String, SqliteDb>,
    current: Option<String>,
}

/// Lines in MySQL-flavoured dumps that SQLite cannot run and that carry no
/// data.
fn dump_directive() -> Regex {
    Regex::new(r"(?i)^\s*(SET\s|LOCK\s+TABLES|UNLOCK\s+TABLES|CREATE\s+DATABASE|USE\s|/\*!)").unwrap()
}

fn portable_dump(dump: &str) -> String {
    let directive = dump_directive();
    let table_options = Regex::new(r"(?i)\)\s*ENGINE\s*=[^;]*;").unwrap();
    let kept: Vec<&str> = dump.lines().filter(|l| !directive.is_match(l)).collect();
    table_options.replace_all(&kept.join("\n"), ");").into_owned()
}

fn open_sqlite(name: &str, dump: &str) -> Result<Connection, EnvError> {
    let conn = Connection::open_in_memory().map_err(|e| EnvError::Evaluation(format!("sqlite: {e}")))?;
    conn.execute_batch(&portable_dump(dump))
        .map_err(|e| EnvError::Argument(format!("loading dump for database {name:?}: {e}")))?;
    Ok(conn)
}

impl SqliteEngine {
    pub fn from_dumps<I, N, D>(dumps: I) -> Result<Self, EnvError>
    where
        I: IntoIterator<Item = (N, D)>,
        N: Into<String>,
        D: Into<String>,
    {
        let mut dbs = BTreeMap::new();
        for (name, dump) in dumps {
            let name = name.into().to_lowercase();
            let dump = dump.into();
            let conn = open_sqlite(&name, &dump)?;
            dbs.insert(name, SqliteDb { dump, conn, dirty: false });
        }
        if dbs.is_empty() {
            return Err(EnvError::Argument("no database dumps given".into()));
        }
        Ok(Self { dbs, current: None })
    }

    pub fn builtin() -> Result<Self, EnvError> {
        Self::from_dumps(BUILTIN_DUMPS)
    }

    /// Load every `*.sql` file in `dir`; the file stem names the database.
    pub fn from_dir(dir: &Path) -> Result<Self, EnvError> {
        let mut dumps = Vec::new();
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("sql") {
                continue;
            }
            let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else { continue };
            dumps.push((stem.to_string(), std::fs::read_to_string(&path)?));
        }
        Self::from_dumps(dumps)
    }

    fn db(&mut self) -> Result<&mut SqliteDb, SqlOutcome> {
        match self.current.as_ref().and_then(|c| self.dbs.get_mut(c)) {
            Some(db) => Ok(db),
            None => Err(SqlOutcome::error("1046 (3D000): No database selected")),
        }
    }

    fn show_tables(&mut self) -> SqlOutcome {
        let db = match self.db() {
            Ok(db) => db,
            Err(e) => return e,
        };
        query_rows(
            &db.conn,
            "SELECT name FROM sqlite_master WHERE type = 'table' AND name NOT LIKE 'sqlite_%' ORDER BY name",
        )
    }

    fn describe(&mut self, table: &str) -> SqlOutcome {
        let current = self.current.clone().unwrap_or_default();
        let db = match self.db() {
            Ok(db) => db,
            Err(e) => return e,
        };
        let cols = (|| -> rusqlite::Result<Vec<Record>> {
            let mut stmt = db.conn.prepare("SELECT name, type, \"notnull\", dflt_value, pk FROM pragma_table_info(?1)")?;
            let rows = stmt.query_map([table], |r| {
                let name: String = r.get(0)?;
                let ty: String = r.get(1)?;
                let notnull: i64 = r.get(2)?;
                let default: Option<String> = r.get(3)?;
                let pk: i64 = r.get(4)?;
                Ok(vec![
                    Cell::text(&name),
                    Cell::text(&ty.to_lowercase()),
                    Cell::text(if notnull != 0 || pk > 0 { "NO" } else { "YES" }),
                    Cell::text(if pk > 0 { "PRI" } else { "" }),
                    default.map_or(Cell::Null, |d| Cell::text(&d)),
                    Cell::text(""),
                ])
            })?;
            rows.collect()
        })();
        match cols {
            Ok(rows) if rows.is_empty() => SqlOutcome::error(format!("1146 (42S02): Table '{current}.{table}' doesn't exist")),
            Ok(rows) => SqlOutcome::ok(rows),
            Err(e) => SqlOutcome::error(e),
        }
    }

    fn select(&mut self, name: &str) -> SqlOutcome {
        let name = name.to_lowercase();
        if self.dbs.contains_key(&name) {
            self.current = Some(name);
            SqlOutcome::ok(Vec::new())
        } else {
            SqlOutcome::error(format!("1049 (42000): Unknown database '{name}'"))
        }
    }

    fn run_native(&mut self, statement: &str, timeout: Duration) -> SqlOutcome {
        let db = match self.db() {
            Ok(db) => db,
            Err(e) => return e,
        };
        let handle = db.conn.get_interrupt_handle();
        let (done, wait) = mpsc::channel::<()>();
        let timer = thread::spawn(move || {
            if let Err(mpsc::RecvTimeoutError::Timeout) = wait.recv_timeout(timeout) {
                handle.interrupt();
                return true;
            }
            false
        });
        let mut outcome = match db.conn.prepare(statement) {
            Ok(stmt) => {
                if !stmt.readonly() {
                    db.dirty = true;
                }
                collect(stmt)
            }
            Err(e) => SqlOutcome::error(e),
        };
        drop(done);
        if timer.join().unwrap_or(false) && !outcome.result.is_tabular() {
            outcome = SqlOutcome {
                result: ResultSet::error(format!(
                    "{ERROR_PREFIX}3024 (HY000): Query execution was interrupted, maximum statement execution time exceeded"
                )),
                timed_out: true,
            };
        }
        outcome
    }
}

/// `decimal` marks columns declared DECIMAL/NUMERIC, whose integral values
/// SQLite stores as integers.
fn sqlite_cell(v: ValueRef<'_>, decimal: bool) -> Cell {
    match v {
        ValueRef::Null => Cell::Null,
        ValueRef::Integer(i) if decimal => Cell::decimal(&i.to_string()),
        ValueRef::Integer(i) => Cell::Int(i as i128),
        ValueRef::Real(f) => Cell::float(f),
        ValueRef::Text(t) => Cell::text(&String::from_utf8_lossy(t)),
        ValueRef::Blob(b) => Cell::bytes(b),
    }
}

fn collect(mut stmt: rusqlite::Statement<'_>) -> SqlOutcome {
    let width = stmt.column_count();
    let decimal: Vec<bool> = stmt
        .columns()
        .iter()
        .map(|c| {
            c.decl_type()
                .map(|t| {
                    let t = t.to_ascii_lowercase();
                    t.starts_with("dec") || t.starts_with("numeric")
                })
                .unwrap_or(false)
        })
        .collect();
    let mut rows = match stmt.query([]) {
        Ok(rows) => rows,
        Err(e) => return SqlOutcome::error(e),
    };
    let mut out = Vec::new();
    loop {
        match rows.next() {
            Ok(Some(row)) => {
                let mut rec = Vec::with_capacity(width);
                for i in 0..width {
                    match row.get_ref(i) {
                        Ok(v) => rec.push(sqlite_cell(v, decimal[i])),
                        Err(e) => return SqlOutcome::error(e),
                    }
                }
                out.push(rec);
            }
            Ok(None) => break,
            Err(e) => return SqlOutcome::error(e),
        }
    }
    SqlOutcome::ok(out)
}

fn query_rows(conn: &Connection, sql: &str) -> SqlOutcome {
    match conn.prepare(sql) {
        Ok(stmt) => collect(stmt),
        Err(e) => SqlOutcome::error(e),
    }
}

impl SqlEngine for SqliteEngine {
    fn kind(&self) -> &'static str {
        "sqlite"
    }

    fn databases(&mut self) -> Result<Vec<String>, EnvError> {
        Ok(self.dbs.keys().cloned().collect())
    }

    fn current_database(&mut self) -> Result<Option<String>, EnvError> {
        Ok(self.current.clone())
    }

    fn use_database(&mut self, db: &str) -> Result<(), EnvError> {
        let outcome = self.select(db);
        match outcome.result.error {
            Some(e) => Err(EnvError::Argument(e)),
            None => Ok(()),
        }
    }

    fn run(&mut self, statement: &str, timeout: Duration) -> Result<SqlOutcome, EnvError> {
        static SHOW_TABLES: &str = r"(?is)^SHOW\s+(FULL\s+)?TABLES$";
        static SHOW_DATABASES: &str = r"(?is)^SHOW\s+(DATABASES|SCHEMAS)$";
        static DESCRIBE: &str = r"(?is)^(?:DESC|DESCRIBE|EXPLAIN)\s+(\S+)$|^SHOW\s+(?:FULL\s+)?COLUMNS\s+FROM\s+(\S+)$";
        static USE: &str = r"(?is)^USE\s+(\S+)$";
        let stmt = clean_statement(statement);
        if Regex::new(SHOW_TABLES).unwrap().is_match(stmt) {
            return Ok(self.show_tables());
        }
        if Regex::new(SHOW_DATABASES).unwrap().is_match(stmt) {
            return Ok(SqlOutcome::ok(self.dbs.keys().map(|d| vec![Cell::text(d)]).collect()));
        }
        if let Some(c) = Regex::new(DESCRIBE).unwrap().captures(stmt) {
            let table = c.get(1).or_else(|| c.get(2)).unwrap().as_str();
            return Ok(self.describe(unquote_ident(table)));
        }
        if let Some(c) = Regex::new(USE).unwrap().captures(stmt) {
            return Ok(self.select(unquote_ident(&c[1])));
        }
        Ok(self.run_native(stmt, timeout))
    }

    fn restore(&mut self) -> Result<(), EnvError> {
        for (name, db) in self.dbs.iter_mut().filter(|(_, db)| db.dirty) {
            db.conn = open_sqlite(name, &db.dump)?;
            db.dirty = false;
        }
        Ok(())
    }
}

// ----------------------------------------------------------------- mysql

#[cfg(feature = "mysql")]
pub use self::mysql_engine::MysqlEngine;

#[cfg(feature = "mysql")]
mod mysql_engine {
    use std::time::{Duration, Instant};

    use mysql::consts::ColumnType;
    use mysql::prelude::Queryable;
    use mysql::{Conn, Opts, OptsBuilder, Value};

    use super::{SqlEngine, SqlOutcome, ERROR_PREFIX};
    use crate::backend::{Backend, Container, ContainerSpec, EntryMode};
    use crate::episode::EnvError;
    use crate::scoring::{Cell, Record, ResultSet};

    const BINARY_CHARSET: u16 = 63;
    const MAX_EXECUTION_TIME_EXCEEDED: u16 = 3024;

    /// Client for a MySQL server, optionally one running in a container this
    /// engine owns.
    pub struct MysqlEngine {
        opts: Opts,
        conn: Conn,
        container: Option<Box<dyn Container>>,
    }

    fn infra(e: impl std::fmt::Display) -> EnvError {
        EnvError::Infrastructure(crate::backend::BackendError::Protocol(format!("mysql: {e}")))
    }

    fn connect_when_ready(opts: &Opts, deadline: Duration) -> Result<Conn, EnvError> {
        let start = Instant::now();
        loop {
            let attempt = Conn::new(opts.clone()).and_then(|mut c| c.query_drop("SELECT 1").map(|_| c));
            match attempt {
                Ok(c) => return Ok(c),
                Err(e) if start.elapsed() >= deadline => {
                    return Err(infra(format!("server not ready after {}s: {e}", deadline.as_secs())))
                }
                Err(_) => std::thread::sleep(Duration::from_millis(500)),
            }
        }
    }

    impl MysqlEngine {
        pub fn connect(url: &str, ready_timeout: Duration) -> Result<Self, EnvError> {
            let opts = Opts::from_url(url).map_err(|e| EnvError::Argument(format!("bad MySQL url: {e}")))?;
            let opts: Opts = OptsBuilder::from_opts(opts)
                .tcp_connect_timeout(Some(Duration::from_secs(5)))
                .read_timeout(Some(Duration::from_secs(600)))
                .into();
            let conn = connect_when_ready(&opts, ready_timeout)?;
            Ok(Self {
                opts,
                conn,
                container: None,
            })
        }

        /// Start `image` (its entrypoint loads the dumps) and connect as root.
        pub fn provision(
            backend: &dyn Backend,
            image: &str,
            root_password: &str,
            ready_timeout: Duration,
        ) -> Result<Self, EnvError> {
            let mut spec = ContainerSpec::new(image, "/");
            spec.entry_mode = EntryMode::Service;
            spec.env_vars.insert("MYSQL_ROOT_PASSWORD".into(), root_password.into());
            let container = backend.provision(&spec)?;
            let addr = match container.network_address() {
                Ok(Some(a)) => a,
                Ok(None) => {
                    let _ = container.remove();
                    return Err(EnvError::Argument(format!(
                        "{} backend gives containers no network address",
                        backend.kind()
                    )));
                }
                Err(e) => {
                    let _ = container.remove();
                    return Err(e.into());
                }
            };
            let url = format!("mysql://root:{}@{addr}:3306", crate::http::encode_component(root_password));
            match Self::connect(&url, ready_timeout) {
                Ok(mut engine) => {
                    engine.container = Some(container);
                    Ok(engine)
                }
                Err(e) => {
                    let _ = container.remove();
                    Err(e)
                }
            }
        }

        fn cell(value: Value, ty: ColumnType, charset: u16) -> Cell {
            let raw = match value {
                Value::NULL => return Cell::Null,
                Value::Int(i) => return Cell::Int(i as i128),
                Value::UInt(u) => return Cell::Int(u as i128),
                Value::Float(f) => return Cell::float(f as f64),
                Value::Double(f) => return Cell::float(f),
                Value::Bytes(b) => b,
                other => return Cell::text(&other.as_sql(true)),
            };
            let text = || String::from_utf8_lossy(&raw).into_owned();
            use ColumnType::*;
            match ty {
                MYSQL_TYPE_TINY | MYSQL_TYPE_SHORT | MYSQL_TYPE_LONG | MYSQL_TYPE_LONGLONG | MYSQL_TYPE_INT24
                | MYSQL_TYPE_YEAR => text().parse::<i128>().map(Cell::Int).unwrap_or_else(|_| Cell::text(&text())),
                MYSQL_TYPE_DECIMAL | MYSQL_TYPE_NEWDECIMAL => Cell::decimal(&text()),
                MYSQL_TYPE_FLOAT | MYSQL_TYPE_DOUBLE => {
                    text().parse::<f64>().map(Cell::float).unwrap_or_else(|_| Cell::text(&text()))
                }
                MYSQL_TYPE_BIT => Cell::bytes(&raw),
                MYSQL_TYPE_TINY_BLOB | MYSQL_TYPE_MEDIUM_BLOB | MYSQL_TYPE_LONG_BLOB | MYSQL_TYPE_BLOB
                | MYSQL_TYPE_STRING | MYSQL_TYPE_VAR_STRING | MYSQL_TYPE_VARCHAR
                    if charset == BINARY_CHARSET =>
                {
                    Cell::bytes(&raw)
                }
                _ => Cell::text(&text()),
            }
        }

        fn query(&mut self, statement: &str) -> mysql::Result<Vec<Record>> {
            let mut result = self.conn.query_iter(statement)?;
            let mut rows = Vec::new();
            // Only the first result set counts, as with a client cursor.
            if let Some(set) = result.iter() {
                let columns: Vec<(ColumnType, u16)> =
                    set.columns().as_ref().iter().map(|c| (c.column_type(), c.character_set())).collect();
                for row in set {
                    let values = row?.unwrap();
                    rows.push(
                        values
                            .into_iter()
                            .zip(&columns)
                            .map(|(v, &(ty, cs))| Self::cell(v, ty, cs))
                            .collect(),
                    );
                }
            }
            drop(result);
            Ok(rows)
        }
    }

    impl SqlEngine for MysqlEngine {
        fn kind(&self) -> &'static str {
            "mysql"
        }

        fn databases(&mut self) -> Result<Vec<String>, EnvError> {
            const SYSTEM: [&str; 4] = ["information_schema", "mysql", "performance_schema", "sys"];
            let names: Vec<String> = self.conn.query("SHOW DATABASES").map_err(infra)?;
            Ok(names.into_iter().filter(|n| !SYSTEM.contains(&n.as_str())).collect())
        }

        fn current_database(&mut self) -> Result<Option<String>, EnvError> {
            let db: Option<Option<String>> = self.conn.query_first("SELECT DATABASE()").map_err(infra)?;
            Ok(db.flatten())
        }

        fn use_database(&mut self, db: &str) -> Result<(), EnvError> {
            let quoted = format!("`{}`", db.replace('`', "``"));
            self.conn.query_drop(format!("USE {quoted}")).map_err(|e| match e {
                mysql::Error::MySqlError(e) => EnvError::Argument(e.message),
                e => infra(e),
            })
        }

        fn run(&mut self, statement: &str, timeout: Duration) -> Result<SqlOutcome, EnvError> {
            let ms = timeout.as_millis().max(1);
            self.conn
                .query_drop(format!("SET SESSION max_execution_time = {ms}"))
                .map_err(infra)?;
            match self.query(super::clean_statement(statement)) {
                Ok(rows) => Ok(SqlOutcome::ok(rows)),
                Err(mysql::Error::MySqlError(e)) => Ok(SqlOutcome {
                    timed_out: e.code == MAX_EXECUTION_TIME_EXCEEDED,
                    result: ResultSet::error(format!("{ERROR_PREFIX}{} ({}): {}", e.code, e.state, e.message)),
                }),
                Err(e) => {
                    // Leave a usable connection behind for the next episode.
                    if let Ok(c) = Conn::new(self.opts.clone()) {
                        self.conn = c;
                    }
                    Err(infra(e))
                }
            }
        }

        fn close(&mut self) -> Result<(), EnvError> {
            if let Some(c) = self.container.take() {
                c.remove()?;
            }
            Ok(())
        }
    }

    impl Drop for MysqlEngine {
        fn drop(&mut self) {
            let _ = self.close();
        }
    }
}

// ------------------------------------------------------------ environment

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "engine", rename_all = "snake_case")]
pub enum SqlEngineConfig {
    /// In-process SQLite over a dump directory, or the built-in dumps.
    Sqlite {
        #[serde(default)]
        dumps: Option<PathBuf>,
    },
    /// An already running server.
    Mysql { url: String },
    /// A server started from `image` through the backend.
    MysqlContainer {
        #[serde(default = "default_image")]
        image: String,
        #[serde(default = "default_password")]
        root_password: String,
    },
}

fn default_image() -> String {
    DEFAULT_IMAGE.into()
}

fn default_password() -> String {
    "execbench".into()
}

impl Default for SqlEngineConfig {
    fn default() -> Self {
        SqlEngineConfig::Sqlite { dumps: None }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SqlConfig {
    #[serde(flatten)]
    pub engine: SqlEngineConfig,
    /// Statements run before each episode. Allows tasks whose gold writes.
    #[serde(default)]
    pub reset_script: Option<String>,
}

impl SqlConfig {
    pub fn open_engine(&self, backend: Option<&Arc<dyn Backend>>) -> Result<Box<dyn SqlEngine>, EnvError> {
        match &self.engine {
            SqlEngineConfig::Sqlite { dumps: None } => Ok(Box::new(SqliteEngine::builtin()?)),
            SqlEngineConfig::Sqlite { dumps: Some(dir) } => Ok(Box::new(SqliteEngine::from_dir(dir)?)),
            #[cfg(feature = "mysql")]
            SqlEngineConfig::Mysql { url } => Ok(Box::new(MysqlEngine::connect(url, READY_TIMEOUT)?)),
            #[cfg(feature = "mysql")]
            SqlEngineConfig::MysqlContainer { image, root_password } => {
                let backend = backend.ok_or_else(|| EnvError::Argument("a container backend is required".into()))?;
                Ok(Box::new(MysqlEngine::provision(backend.as_ref(), image, root_password, READY_TIMEOUT)?))
            }
            #[cfg(not(feature = "mysql"))]
            _ => {
                let _ = backend;
                Err(EnvError::Argument("built without MySQL support".into()))
            }
        }
    }
}

pub struct SqlEnv {
    engine: Box<dyn SqlEngine>,
    config: SqlConfig,
    databases: Vec<String>,
    db: Option<String>,
    latest: Option<ResultSet>,
    gold: Option<ResultSet>,
    closed: bool,
}

impl SqlEnv {
    pub fn new(config: SqlConfig, backend: Option<Arc<dyn Backend>>) -> Result<Self, EnvError> {
        let engine = config.open_engine(backend.as_ref())?;
        Self::with_engine(engine, config)
    }

    pub fn with_engine(mut engine: Box<dyn SqlEngine>, config: SqlConfig) -> Result<Self, EnvError> {
        let databases = engine.databases()?;
        Ok(Self {
            engine,
            config,
            databases,
            db: None,
            latest: None,
            gold: None,
            closed: false,
        })
    }

    pub fn databases(&self) -> &[String] {
        &self.databases
    }

    /// Run one statement and parse its result.
    pub fn run_sql(&mut self, statement: &str, timeout: Duration) -> Result<ResultSet, EnvError> {
        Ok(self.engine.run(statement, timeout)?.result)
    }

    fn task_db(&self, task: &TaskInstance) -> Option<String> {
        task.extra_string("db")
            .map(|d| d.to_lowercase())
            .or_else(|| (self.databases.len() == 1).then(|| self.databases[0].clone()))
    }

    fn gold_result(&mut self, task: &TaskInstance, timeout: Duration) -> Result<ResultSet, EnvError> {
        if let Some(g) = &self.gold {
            return Ok(g.clone());
        }
        let previous = self.engine.current_database()?;
        if let Some(db) = &self.db {
            self.engine.use_database(db)?;
        }
        let out = self.engine.run(&task.gold, timeout);
        if let Some(prev) = previous.filter(|p| Some(p) != self.db.as_ref()) {
            self.engine.use_database(&prev)?;
        }
        let out = out?;
        if let Some(e) = &out.result.error {
            return Err(EnvError::Evaluation(format!("gold query for task {} failed: {e}", task.id)));
        }
        self.gold = Some(out.result.clone());
        Ok(out.result)
    }

    fn score(&mut self, task: &TaskInstance, timeout: Duration) -> Result<RewardBreakdown, EnvError> {
        let gold = self.gold_result(task, timeout)?;
        let latest = self
            .latest
            .clone()
            .unwrap_or_else(|| ResultSet::error("no query has been executed"));
        Ok(RewardBreakdown::Sql(sql_reward(&latest, &gold)))
    }
}

impl Environment for SqlEnv {
    fn name(&self) -> &str {
        "sql"
    }

    fn reset(&mut self, task: &TaskInstance) -> Result<(), EnvError> {
        self.latest = None;
        self.gold = None;
        self.engine.restore()?;
        self.db = self.task_db(task);
        if let Some(db) = &self.db {
            self.engine.use_database(db)?;
        }
        if let Some(script) = &self.config.reset_script {
            for stmt in script.split(';').map(str::trim).filter(|s| !s.is_empty()) {
                let out = self.engine.run(stmt, READY_TIMEOUT)?;
                if let Some(e) = &out.result.error {
                    return Err(EnvError::Evaluation(format!("reset script: {e}")));
                }
            }
        }
        Ok(())
    }

    fn execute(&mut self, code: &str, timeout: Duration) -> Result<Execution, EnvError> {
        let out = self.engine.run(code, timeout)?;
        let rows = out.result.is_tabular().then_some(out.result.rows.len());
        let exec = match out.result.error.clone() {
            None => {
                let mut e = Execution::ok(out.result.render());
                e.exit_status = None;
                e
            }
            Some(msg) => Execution::failed(msg, if out.timed_out { ErrorClass::Timeout } else { ErrorClass::ExecError }),
        };
        let mut exec = exec;
        if let Some(n) = rows {
            exec.info.insert("rows".into(), json!(n));
        }
        self.latest = Some(out.result);
        Ok(exec)
    }

    fn submit(&mut self, task: &TaskInstance, payload: Option<&str>, timeout: Duration) -> Result<Submission, EnvError> {
        let execution = match payload.map(str::trim).filter(|p| !p.is_empty()) {
            Some(code) => Some(self.execute(code, timeout)?),
            None => None,
        };
        let breakdown = self.score(task, timeout)?;
        Ok(Submission { execution, breakdown })
    }

    fn interim_reward(&mut self, task: &TaskInstance, timeout: Duration) -> Result<Option<RewardBreakdown>, EnvError> {
        self.score(task, timeout).map(Some)
    }

    fn validate_task(&self, task: &TaskInstance) -> Result<(), String> {
        match self.task_db(task) {
            Some(db) if !self.databases.contains(&db) => return Err(format!("unknown database {db:?}")),
            None => return Err("task names no database (extras.db)".into()),
            _ => {}
        }
        if self.config.reset_script.is_none() && is_mutating(&task.gold) {
            return Err("gold query modifies the database and no reset script is configured".into());
        }
        Ok(())
    }

    fn gold_plan(&self, task: &TaskInstance) -> GoldPlan {
        GoldPlan {
            actions: vec![task.gold.trim().to_string()],
            submit: None,
        }
    }

    fn config_snapshot(&self) -> Value {
        json!({
            "engine": self.engine.kind(),
            "databases": self.databases,
            "reset_script": self.config.reset_script.is_some(),
        })
    }

    fn close(&mut self) -> Result<(), EnvError> {
        if self.closed {
            return Ok(());
        }
        self.closed = true;
        self.engine.close()
    }
}
