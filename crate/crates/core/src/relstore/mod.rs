//! Relational store: typed CSV ingest under a JSON schema manifest, plus hash
//! indexes on every primary and foreign key.

mod index;
mod schema;
mod table;
mod value;

pub use index::{DanglingReference, IndexedStore, LinkId, RowRef};
pub use schema::{load_schema, ColumnSpec, ForeignKeyRef, Link, Schema, TableSpec};
pub use table::{load_table, Row, Table};
pub use value::{format_timestamp, parse_timestamp, DType, Value};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("reference error: {0}")]
    Reference(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("duplicate table `{0}`")]
    DuplicateTable(String),
    #[error("duplicate column `{table}.{column}`")]
    DuplicateColumn { table: String, column: String },
    #[error("unknown table `{0}`")]
    UnknownTable(String),
    #[error("unknown link `{0}`")]
    UnknownLink(String),
    #[error("table `{0}` has no primary key")]
    NoPrimaryKey(String),
    #[error("{table}: header mismatch, expected `{expected}`, found `{found}`")]
    HeaderMismatch {
        table: String,
        expected: String,
        found: String,
    },
    #[error("{table} row {row}, column `{column}`: {message}")]
    Cell {
        table: String,
        row: usize,
        column: String,
        message: String,
    },
    #[error("duplicate primary key {key} in `{table}`")]
    DuplicateKey { table: String, key: String },
    #[error("cannot compare {left} with {right}")]
    TagMismatch {
        left: &'static str,
        right: &'static str,
    },
    #[error("io: {0}")]
    Io(String),
}
