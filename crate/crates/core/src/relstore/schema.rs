use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{DType, StoreError};

/// Target of a foreign-key column.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ForeignKeyRef {
    pub table: String,
    pub column: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub dtype: DType,
    #[serde(
        default,
        rename = "primary_key",
        skip_serializing_if = "std::ops::Not::not"
    )]
    pub is_primary_key: bool,
    #[serde(default, rename = "foreign_key", skip_serializing_if = "Option::is_none")]
    pub foreign_key_target: Option<ForeignKeyRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableSpec {
    pub name: String,
    /// CSV path, relative to the manifest's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp_column: Option<String>,
    pub columns: Vec<ColumnSpec>,
}

impl TableSpec {
    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn primary_key(&self) -> Option<usize> {
        self.columns.iter().position(|c| c.is_primary_key)
    }

    pub fn timestamp_index(&self) -> Option<usize> {
        self.timestamp_column
            .as_deref()
            .and_then(|c| self.column_index(c))
    }

    /// Fact tables carry a timestamp column; dimension tables do not.
    pub fn is_fact(&self) -> bool {
        self.timestamp_column.is_some()
    }
}

/// A foreign-key column pointing at a primary-key column.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Link {
    pub fkey_table: String,
    pub fkey_column: String,
    pub pkey_table: String,
    pub pkey_column: String,
}

/// Validated table declarations plus the derived link set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub tables: Vec<TableSpec>,
    #[serde(skip)]
    pub links: Vec<Link>,
}

#[derive(Deserialize)]
struct Manifest {
    tables: Vec<TableSpec>,
}

impl Schema {
    pub fn table(&self, name: &str) -> Option<&TableSpec> {
        self.tables.iter().find(|t| t.name == name)
    }

    pub fn to_manifest_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serializes")
    }
}

/// Parses and validates a schema manifest.
pub fn load_schema(manifest_text: &str) -> Result<Schema, StoreError> {
    let manifest: Manifest =
        serde_json::from_str(manifest_text).map_err(|e| StoreError::Parse(e.to_string()))?;
    let tables = manifest.tables;

    let mut names = HashSet::new();
    for t in &tables {
        if !names.insert(t.name.as_str()) {
            return Err(StoreError::DuplicateTable(t.name.clone()));
        }
        let mut cols = HashSet::new();
        for c in &t.columns {
            if !cols.insert(c.name.as_str()) {
                return Err(StoreError::DuplicateColumn {
                    table: t.name.clone(),
                    column: c.name.clone(),
                });
            }
        }
        if t.columns.iter().filter(|c| c.is_primary_key).count() > 1 {
            return Err(StoreError::Schema(format!(
                "table `{}` declares more than one primary key column",
                t.name
            )));
        }
        if let Some(ts) = &t.timestamp_column {
            match t.column_index(ts) {
                Some(i) if t.columns[i].dtype == DType::Timestamp => {}
                Some(_) => {
                    return Err(StoreError::Schema(format!(
                        "timestamp column `{}.{ts}` must have dtype timestamp",
                        t.name
                    )))
                }
                None => {
                    return Err(StoreError::Reference(format!(
                        "timestamp column `{}.{ts}` is not declared",
                        t.name
                    )))
                }
            }
        }
    }

    let mut links = Vec::new();
    for t in &tables {
        for c in &t.columns {
            let Some(fk) = &c.foreign_key_target else {
                continue;
            };
            let target = tables.iter().find(|x| x.name == fk.table).ok_or_else(|| {
                StoreError::Reference(format!(
                    "`{}.{}` references missing table `{}`",
                    t.name, c.name, fk.table
                ))
            })?;
            let pk = target.primary_key().map(|i| &target.columns[i]);
            match pk {
                Some(pk) if pk.name == fk.column => {
                    if pk.dtype != c.dtype {
                        return Err(StoreError::Schema(format!(
                            "`{}.{}` is {} but `{}.{}` is {}",
                            t.name, c.name, c.dtype, fk.table, fk.column, pk.dtype
                        )));
                    }
                }
                _ => {
                    return Err(StoreError::Reference(format!(
                        "`{}.{}` must reference the primary key of `{}`, not `{}`",
                        t.name, c.name, fk.table, fk.column
                    )))
                }
            }
            links.push(Link {
                fkey_table: t.name.clone(),
                fkey_column: c.name.clone(),
                pkey_table: fk.table.clone(),
                pkey_column: fk.column.clone(),
            });
        }
    }

    Ok(Schema { tables, links })
}
