//! Hash indexes over primary and foreign keys.
//!
//! Foreign-key postings are kept sorted by `(timestamp desc, ordinal asc)` so
//! that "the `n` most recent rows before `t`" is a binary search plus a
//! slice. Index maps are insertion ordered, so iteration is a pure function
//! of the input rows.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::Serialize;

use super::{load_schema, load_table, Link, Row, Schema, StoreError, Table, Value};

/// Position of a link in [`IndexedStore::links`].
pub type LinkId = usize;

/// A foreign-key value with no matching primary key.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DanglingReference {
    pub link: Link,
    pub row: usize,
    pub value: String,
}

/// Borrowed view of one row together with its table.
#[derive(Debug, Clone, Copy)]
pub struct RowRef<'a> {
    pub table: &'a Table,
    pub ordinal: usize,
}

impl<'a> RowRef<'a> {
    pub fn row(&self) -> &'a Row {
        &self.table.rows[self.ordinal]
    }

    pub fn timestamp(&self) -> Option<i64> {
        self.row().timestamp
    }

    pub fn get(&self, column: &str) -> Option<&'a Value> {
        self.table
            .spec
            .column_index(column)
            .map(|i| &self.row().values[i])
    }
}

/// Immutable, indexed relational database.
#[derive(Debug)]
pub struct IndexedStore {
    tables: Vec<Table>,
    table_ids: HashMap<String, usize>,
    links: Vec<Link>,
    pk_index: Vec<Option<IndexMap<Value, usize>>>,
    fk_index: Vec<IndexMap<Value, Vec<usize>>>,
    links_by_pkey: Vec<Vec<LinkId>>,
    dangling: Vec<DanglingReference>,
}

impl IndexedStore {
    /// Builds primary- and foreign-key indexes. Tables keep the given order.
    pub fn build(tables: Vec<Table>, links: Vec<Link>) -> Result<Self, StoreError> {
        let table_ids: HashMap<String, usize> = tables
            .iter()
            .enumerate()
            .map(|(i, t)| (t.name().to_string(), i))
            .collect();

        let pk_index: Vec<Option<IndexMap<Value, usize>>> = tables
            .iter()
            .map(|t| {
                t.spec.primary_key().map(|p| {
                    t.rows
                        .iter()
                        .enumerate()
                        .map(|(i, r)| (r.values[p].clone(), i))
                        .collect()
                })
            })
            .collect();

        let mut fk_index = Vec::with_capacity(links.len());
        let mut links_by_pkey = vec![Vec::new(); tables.len()];
        let mut dangling = Vec::new();
        for (link_id, link) in links.iter().enumerate() {
            let (Some(&ft), Some(&pt)) = (
                table_ids.get(&link.fkey_table),
                table_ids.get(&link.pkey_table),
            ) else {
                return Err(StoreError::Reference(format!(
                    "link {}.{} -> {}.{} names a missing table",
                    link.fkey_table, link.fkey_column, link.pkey_table, link.pkey_column
                )));
            };
            let fcol = tables[ft].spec.column_index(&link.fkey_column).ok_or_else(|| {
                StoreError::Reference(format!("missing column {}.{}", link.fkey_table, link.fkey_column))
            })?;
            links_by_pkey[pt].push(link_id);

            let table = &tables[ft];
            let mut postings: IndexMap<Value, Vec<usize>> = IndexMap::new();
            for (ordinal, row) in table.rows.iter().enumerate() {
                let v = &row.values[fcol];
                if v.is_null() {
                    continue;
                }
                postings.entry(v.clone()).or_default().push(ordinal);
            }
            for list in postings.values_mut() {
                // Stable sort keeps ordinal order among equal timestamps.
                list.sort_by_key(|&o| std::cmp::Reverse(table.rows[o].timestamp));
            }
            let target = pk_index[pt].as_ref();
            let mut missing = 0usize;
            for (value, list) in &postings {
                if target.is_some_and(|idx| idx.contains_key(value)) {
                    continue;
                }
                missing += list.len();
                for &row in list {
                    log::debug!(
                        "dangling reference {}.{}={} (row {row})",
                        link.fkey_table,
                        link.fkey_column,
                        value
                    );
                    dangling.push(DanglingReference {
                        link: link.clone(),
                        row,
                        value: value.to_string(),
                    });
                }
            }
            if missing > 0 {
                log::warn!(
                    "{missing} dangling references in {}.{} -> {}",
                    link.fkey_table,
                    link.fkey_column,
                    link.pkey_table
                );
            }
            fk_index.push(postings);
        }

        Ok(Self {
            tables,
            table_ids,
            links,
            pk_index,
            fk_index,
            links_by_pkey,
            dangling,
        })
    }

    /// Reads a schema manifest and every table's CSV file (paths relative to
    /// the manifest's directory), then builds the indexes.
    pub fn open(manifest_path: &Path) -> Result<Self, StoreError> {
        let text = fs::read_to_string(manifest_path)
            .map_err(|e| StoreError::Io(format!("{}: {e}", manifest_path.display())))?;
        let schema = load_schema(&text)?;
        let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_dir(schema, base)
    }

    pub fn from_dir(schema: Schema, base: &Path) -> Result<Self, StoreError> {
        let mut tables = Vec::with_capacity(schema.tables.len());
        for spec in &schema.tables {
            let file = spec.file.clone().unwrap_or_else(|| format!("{}.csv", spec.name));
            let path = base.join(&file);
            let csv = fs::read_to_string(&path)
                .map_err(|e| StoreError::Io(format!("{}: {e}", path.display())))?;
            tables.push(load_table(&schema, &spec.name, &csv)?);
        }
        Self::build(tables, schema.links)
    }

    pub fn schema(&self) -> Schema {
        Schema {
            tables: self.tables.iter().map(|t| t.spec.clone()).collect(),
            links: self.links.clone(),
        }
    }

    pub fn tables(&self) -> &[Table] {
        &self.tables
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.table_ids.get(name).map(|&i| &self.tables[i])
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn link_id(&self, link: &Link) -> Option<LinkId> {
        self.links.iter().position(|l| l == link)
    }

    /// Links whose primary-key side is `table`, in schema order.
    pub fn links_into(&self, table: &str) -> &[LinkId] {
        self.table_ids
            .get(table)
            .map(|&i| self.links_by_pkey[i].as_slice())
            .unwrap_or(&[])
    }

    /// Links whose foreign-key side is `table`, in schema order.
    pub fn links_from<'s>(&'s self, table: &'s str) -> impl Iterator<Item = (LinkId, &'s Link)> + 's {
        self.links
            .iter()
            .enumerate()
            .filter(move |(_, l)| l.fkey_table == table)
    }

    pub fn dangling_references(&self) -> &[DanglingReference] {
        &self.dangling
    }

    pub fn total_rows(&self) -> usize {
        self.tables.iter().map(Table::len).sum()
    }

    /// The row whose primary key equals `key`.
    pub fn lookup_pk(&self, table: &str, key: &Value) -> Result<Option<RowRef<'_>>, StoreError> {
        let &tid = self
            .table_ids
            .get(table)
            .ok_or_else(|| StoreError::UnknownTable(table.to_string()))?;
        let idx = self.pk_index[tid]
            .as_ref()
            .ok_or_else(|| StoreError::NoPrimaryKey(table.to_string()))?;
        Ok(idx.get(key).map(|&ordinal| RowRef {
            table: &self.tables[tid],
            ordinal,
        }))
    }

    /// Up to `limit` rows referencing `key` through `link`, newest first.
    /// Fact-table rows must be strictly older than `cutoff` when one is given;
    /// dimension-table rows always pass.
    pub fn lookup_fk_before(
        &self,
        link: &Link,
        key: &Value,
        cutoff: Option<i64>,
        limit: usize,
    ) -> Result<Vec<RowRef<'_>>, StoreError> {
        let id = self
            .link_id(link)
            .ok_or_else(|| StoreError::UnknownLink(format!("{}.{}", link.fkey_table, link.fkey_column)))?;
        Ok(self.fk_rows(id, key, cutoff, limit).collect())
    }

    /// Same as [`Self::lookup_fk_before`] for a resolved link id.
    pub fn fk_rows(
        &self,
        link: LinkId,
        key: &Value,
        cutoff: Option<i64>,
        limit: usize,
    ) -> impl Iterator<Item = RowRef<'_>> + '_ {
        let table = &self.tables[self.table_ids[&self.links[link].fkey_table]];
        let list: &[usize] = self.fk_index[link].get(key).map(Vec::as_slice).unwrap_or(&[]);
        let start = match (cutoff, table.is_fact()) {
            (Some(c), true) => list.partition_point(|&o| table.rows[o].timestamp.is_some_and(|t| t >= c)),
            _ => 0,
        };
        list[start..]
            .iter()
            .take(limit)
            .map(move |&ordinal| RowRef { table, ordinal })
    }

    /// Raw posting list for `key`, for inspection and tests.
    pub fn fk_postings(&self, link: LinkId, key: &Value) -> &[usize] {
        self.fk_index[link].get(key).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Iterates every (key, postings) pair of a foreign-key index in its
    /// deterministic order.
    pub fn fk_entries(&self, link: LinkId) -> impl Iterator<Item = (&Value, &[usize])> {
        self.fk_index[link].iter().map(|(k, v)| (k, v.as_slice()))
    }
}
