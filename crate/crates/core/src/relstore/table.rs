use std::collections::HashSet;

use super::{Schema, StoreError, TableSpec, Value};

/// One entity: values in declared column order.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub values: Vec<Value>,
    /// Mirrors the timestamp column; present iff the table is a fact table.
    pub timestamp: Option<i64>,
}

#[derive(Debug, Clone)]
pub struct Table {
    pub spec: TableSpec,
    pub rows: Vec<Row>,
}

impl Table {
    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn is_fact(&self) -> bool {
        self.spec.is_fact()
    }
}

/// Parses a CSV file for `table_name` under the schema's declared columns.
pub fn load_table(schema: &Schema, table_name: &str, csv_text: &str) -> Result<Table, StoreError> {
    let spec = schema
        .table(table_name)
        .ok_or_else(|| StoreError::UnknownTable(table_name.to_string()))?
        .clone();

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(csv_text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| StoreError::Parse(format!("{table_name}: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    let declared: Vec<&str> = spec.columns.iter().map(|c| c.name.as_str()).collect();
    if header != declared {
        return Err(StoreError::HeaderMismatch {
            table: table_name.to_string(),
            expected: declared.join(","),
            found: header.join(","),
        });
    }

    let ts_idx = spec.timestamp_index();
    let pk_idx = spec.primary_key();
    let mut seen_pk = HashSet::new();
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        // 1-based data row number, not counting the header.
        let line = i + 1;
        let record = record.map_err(|e| StoreError::Parse(format!("{table_name} row {line}: {e}")))?;
        if record.len() != spec.columns.len() {
            return Err(StoreError::Parse(format!(
                "{table_name} row {line}: expected {} fields, found {}",
                spec.columns.len(),
                record.len()
            )));
        }
        let mut values = Vec::with_capacity(spec.columns.len());
        for (cell, col) in record.iter().zip(&spec.columns) {
            let v = Value::parse_cell(cell, col.dtype).map_err(|message| StoreError::Cell {
                table: table_name.to_string(),
                row: line,
                column: col.name.clone(),
                message,
            })?;
            values.push(v);
        }
        let timestamp = match ts_idx {
            Some(t) => match values[t] {
                Value::Timestamp(ts) => Some(ts),
                _ => {
                    return Err(StoreError::Cell {
                        table: table_name.to_string(),
                        row: line,
                        column: spec.columns[t].name.clone(),
                        message: "fact-table timestamp is null".into(),
                    })
                }
            },
            None => None,
        };
        if let Some(p) = pk_idx {
            if values[p].is_null() {
                return Err(StoreError::Cell {
                    table: table_name.to_string(),
                    row: line,
                    column: spec.columns[p].name.clone(),
                    message: "primary key is null".into(),
                });
            }
            if !seen_pk.insert(values[p].clone()) {
                return Err(StoreError::DuplicateKey {
                    table: table_name.to_string(),
                    key: values[p].to_string(),
                });
            }
        }
        rows.push(Row { values, timestamp });
    }
    Ok(Table { spec, rows })
}
