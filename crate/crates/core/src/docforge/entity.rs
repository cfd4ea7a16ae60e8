//! Denormalization of one entity into a nested record.
//!
//! Foreign keys are followed toward primary keys by inlining the parent
//! row's fields. Primary keys of every table contributing to the record are
//! then followed toward the foreign-key tables that reference them, taking
//! the most recent rows before the anchor time. Expansion is breadth first,
//! and a table that has already been joined or expanded into is never
//! expanded into again within the same top-level record.

use std::collections::{HashSet, VecDeque};

use crate::relstore::{IndexedStore, RowRef, Value};
use crate::taskdef::{TaskRow, TaskSpec};

/// Where a nested record came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EntitySource {
    Row { table: String, ordinal: usize },
    Task { task: String, id: usize },
}

/// A denormalized entity.
#[derive(Debug, Clone, PartialEq)]
pub struct NestedEntity {
    pub source: EntitySource,
    /// Own columns in schema order; joined parents replace their foreign-key
    /// column with `"<parent_table>.<column>"` fields.
    pub fields: Vec<(String, Value)>,
    /// Parent rows inlined into `fields`, as (table, ordinal).
    pub joined: Vec<(String, usize)>,
    /// Child rows keyed by child table name, newest first.
    pub children: Vec<(String, Vec<NestedEntity>)>,
}

impl NestedEntity {
    /// Longest chain of primary-to-foreign-key expansions below this node.
    pub fn depth(&self) -> usize {
        self.children
            .iter()
            .flat_map(|(_, c)| c.iter())
            .map(|c| 1 + c.depth())
            .max()
            .unwrap_or(0)
    }

    /// Visits every node of the tree, root first.
    pub fn walk<'a>(&'a self, f: &mut impl FnMut(&'a NestedEntity)) {
        f(self);
        for (_, kids) in &self.children {
            for k in kids {
                k.walk(f);
            }
        }
    }
}

/// Expansion knobs shared by every entity of one document.
#[derive(Debug, Clone, Copy)]
pub struct Expansion {
    pub n_nest: usize,
    pub d_max: usize,
    /// Anchor time; fact-table rows at or after it are never included.
    pub cutoff: i64,
}

struct Node {
    entity: NestedEntity,
    /// (table, primary-key value) pairs whose referencing rows may be nested.
    contributing: Vec<(String, Value)>,
    depth: usize,
    kids: Vec<(String, Vec<usize>)>,
}

/// Parent row for a foreign-key value, if it resolves and is visible at
/// `cutoff`.
fn visible_parent<'s>(store: &'s IndexedStore, table: &str, key: &Value, cutoff: i64) -> Option<RowRef<'s>> {
    if key.is_null() {
        return None;
    }
    let parent = store.lookup_pk(table, key).ok().flatten()?;
    match parent.timestamp() {
        Some(t) if t >= cutoff => None,
        _ => Some(parent),
    }
}

/// Inlines `parent` into `fields` under a table-qualified prefix.
fn inline_parent(
    fields: &mut Vec<(String, Value)>,
    prefixes: &mut HashSet<String>,
    fk_column: &str,
    parent: RowRef<'_>,
) {
    let table = parent.table.name();
    let prefix = if prefixes.insert(table.to_string()) {
        table.to_string()
    } else {
        format!("{fk_column}.{table}")
    };
    for (col, v) in parent.table.spec.columns.iter().zip(&parent.row().values) {
        fields.push((format!("{prefix}.{}", col.name), v.clone()));
    }
}

fn row_node(store: &IndexedStore, row: RowRef<'_>, exp: &Expansion, visited: &mut HashSet<String>, depth: usize) -> Node {
    let spec = &row.table.spec;
    let values = &row.row().values;
    let mut fields = Vec::with_capacity(values.len());
    let mut joined = Vec::new();
    let mut contributing = Vec::new();
    if let Some(pk) = spec.primary_key() {
        contributing.push((spec.name.clone(), values[pk].clone()));
    }
    let mut prefixes = HashSet::new();
    for (col, v) in spec.columns.iter().zip(values) {
        let parent = col
            .foreign_key_target
            .as_ref()
            .and_then(|fk| visible_parent(store, &fk.table, v, exp.cutoff));
        match parent {
            Some(p) => {
                inline_parent(&mut fields, &mut prefixes, &col.name, p);
                let ptable = p.table.name().to_string();
                joined.push((ptable.clone(), p.ordinal));
                visited.insert(ptable.clone());
                contributing.push((ptable, v.clone()));
            }
            None => fields.push((col.name.clone(), v.clone())),
        }
    }
    Node {
        entity: NestedEntity {
            source: EntitySource::Row {
                table: spec.name.clone(),
                ordinal: row.ordinal,
            },
            fields,
            joined,
            children: Vec::new(),
        },
        contributing,
        depth,
        kids: Vec::new(),
    }
}

fn task_node(store: &IndexedStore, spec: &TaskSpec, row: &TaskRow, exp: &Expansion, visited: &mut HashSet<String>) -> Node {
    let mut fields = Vec::new();
    let mut joined = Vec::new();
    let mut contributing = Vec::new();
    let mut prefixes = HashSet::new();
    for (fk, v) in spec.entity_fkeys.iter().zip(&row.fkey_values) {
        match visible_parent(store, &fk.link.pkey_table, v, exp.cutoff) {
            Some(p) => {
                inline_parent(&mut fields, &mut prefixes, &fk.column, p);
                let ptable = p.table.name().to_string();
                joined.push((ptable.clone(), p.ordinal));
                visited.insert(ptable.clone());
                contributing.push((ptable, v.clone()));
            }
            None => fields.push((fk.column.clone(), v.clone())),
        }
    }
    fields.push((spec.seed_time_column.clone(), Value::Timestamp(row.seed_time)));
    Node {
        entity: NestedEntity {
            source: EntitySource::Task {
                task: spec.name.clone(),
                id: row.id,
            },
            fields,
            joined,
            children: Vec::new(),
        },
        contributing,
        depth: 0,
        kids: Vec::new(),
    }
}

/// Breadth-first primary-to-foreign-key expansion from `root`.
fn expand(store: &IndexedStore, root: Node, exp: &Expansion, visited: &mut HashSet<String>) -> NestedEntity {
    let mut nodes = vec![root];
    let mut queue = VecDeque::from([0usize]);
    while let Some(i) = queue.pop_front() {
        let depth = nodes[i].depth;
        if depth >= exp.d_max || exp.n_nest == 0 {
            continue;
        }
        let contributing = std::mem::take(&mut nodes[i].contributing);
        for (table, key) in &contributing {
            for &lid in store.links_into(table) {
                let child_table = &store.links()[lid].fkey_table;
                if visited.contains(child_table) {
                    continue;
                }
                let rows: Vec<RowRef<'_>> = store.fk_rows(lid, key, Some(exp.cutoff), exp.n_nest).collect();
                if rows.is_empty() {
                    continue;
                }
                visited.insert(child_table.clone());
                let mut ids = Vec::with_capacity(rows.len());
                for r in rows {
                    let child = row_node(store, r, exp, visited, depth + 1);
                    ids.push(nodes.len());
                    queue.push_back(nodes.len());
                    nodes.push(child);
                }
                nodes[i].kids.push((child_table.clone(), ids));
            }
        }
    }
    assemble(&mut nodes, 0)
}

fn assemble(nodes: &mut [Node], i: usize) -> NestedEntity {
    let kids = std::mem::take(&mut nodes[i].kids);
    let mut entity = std::mem::replace(
        &mut nodes[i].entity,
        NestedEntity {
            source: EntitySource::Task { task: String::new(), id: 0 },
            fields: Vec::new(),
            joined: Vec::new(),
            children: Vec::new(),
        },
    );
    entity.children = kids
        .into_iter()
        .map(|(label, ids)| (label, ids.into_iter().map(|c| assemble(nodes, c)).collect()))
        .collect();
    entity
}

/// Denormalizes a store row: joins its parents, then nests up to `n_nest`
/// referencing rows per link for `d_max - depth` further levels.
///
/// `visited` carries tables already used by earlier denormalization steps of
/// the same top-level record and is updated in place.
pub fn add_related_entities(
    row: RowRef<'_>,
    store: &IndexedStore,
    n_nest: usize,
    depth: usize,
    d_max: usize,
    visited: &mut HashSet<String>,
    cutoff: i64,
) -> NestedEntity {
    let exp = Expansion { n_nest, d_max, cutoff };
    visited.insert(row.table.name().to_string());
    let root = row_node(store, row, &exp, visited, depth);
    expand(store, root, &exp, visited)
}

/// Denormalizes a task-table row anchored at its own seed time, with a fresh
/// visited set.
pub fn expand_task_row(store: &IndexedStore, spec: &TaskSpec, row: &TaskRow, n_nest: usize, d_max: usize) -> NestedEntity {
    let exp = Expansion {
        n_nest,
        d_max,
        cutoff: row.seed_time,
    };
    let mut visited = HashSet::new();
    let root = task_node(store, spec, row, &exp, &mut visited);
    expand(store, root, &exp, &mut visited)
}
