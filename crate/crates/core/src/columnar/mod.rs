//! Columnar in-memory tables.
//!
//! A [`Table`] is a [`Schema`] plus equal-length typed [`Column`]s. Each column
//! carries a validity bitmap; a cleared bit marks a null cell whose payload is
//! never read. Payloads of null cells are normalized to zero (or the empty
//! string) at construction so that serialized bytes are deterministic.
//!
//! Tables are immutable: every operator returns a fresh table.

mod bitmap;
mod compare;
mod key;
mod serial;

use std::fmt;

pub use bitmap::Bitmap;
pub use compare::{
    canonical_compare, canonical_diff, canonical_diff_floor, sort_indices_all_columns, Equality,
};
pub use key::{
    canonical_f64, cmp_rows, cmp_values, encode_and_hash_key, fnv1a64, KeyBytes, KeyEncoder,
    CANONICAL_NAN_BITS, TAG_NULL,
};
pub use serial::{deserialize_table, schema_digest, serialize_table, TABLE_MAGIC};

use crate::error::{Error, Result};

/// The four primitive column types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DataType {
    Int64,
    Float64,
    Bool,
    Utf8,
}

impl DataType {
    /// Wire code used by the table serialization and the key type tags.
    pub fn code(self) -> u8 {
        match self {
            DataType::Int64 => 1,
            DataType::Float64 => 2,
            DataType::Bool => 3,
            DataType::Utf8 => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DataType::Int64),
            2 => Some(DataType::Float64),
            3 => Some(DataType::Bool),
            4 => Some(DataType::Utf8),
            _ => None,
        }
    }

    pub fn is_numeric(self) -> bool {
        matches!(self, DataType::Int64 | DataType::Float64)
    }
}

impl fmt::Display for DataType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DataType::Int64 => "int64",
            DataType::Float64 => "float64",
            DataType::Bool => "bool",
            DataType::Utf8 => "utf8",
        };
        f.write_str(s)
    }
}

/// A borrowed cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Value<'a> {
    Null,
    Int64(i64),
    Float64(f64),
    Bool(bool),
    Utf8(&'a str),
}

impl Value<'_> {
    pub fn is_null(&self) -> bool {
        matches!(self, Value::Null)
    }

    pub fn to_scalar(&self) -> Scalar {
        match *self {
            Value::Null => Scalar::Null,
            Value::Int64(v) => Scalar::Int64(v),
            Value::Float64(v) => Scalar::Float64(v),
            Value::Bool(v) => Scalar::Bool(v),
            Value::Utf8(v) => Scalar::Utf8(v.to_string()),
        }
    }
}

/// An owned cell, used for literals in predicates and for building rows.
#[derive(Debug, Clone, PartialEq)]
pub enum Scalar {
    Null,
    Int64(i64),
    Float64(f64),
    Bool(bool),
    Utf8(String),
}

impl Scalar {
    pub fn as_value(&self) -> Value<'_> {
        match self {
            Scalar::Null => Value::Null,
            Scalar::Int64(v) => Value::Int64(*v),
            Scalar::Float64(v) => Value::Float64(*v),
            Scalar::Bool(v) => Value::Bool(*v),
            Scalar::Utf8(v) => Value::Utf8(v),
        }
    }
}

impl From<i64> for Scalar {
    fn from(v: i64) -> Self {
        Scalar::Int64(v)
    }
}

impl From<f64> for Scalar {
    fn from(v: f64) -> Self {
        Scalar::Float64(v)
    }
}

impl From<bool> for Scalar {
    fn from(v: bool) -> Self {
        Scalar::Bool(v)
    }
}

impl From<&str> for Scalar {
    fn from(v: &str) -> Self {
        Scalar::Utf8(v.to_string())
    }
}

/// Typed payload storage of a column.
#[derive(Debug, Clone, PartialEq)]
pub enum ColumnData {
    Int64(Vec<i64>),
    Float64(Vec<f64>),
    Bool(Vec<bool>),
    Utf8(Vec<String>),
}

impl ColumnData {
    pub fn len(&self) -> usize {
        match self {
            ColumnData::Int64(v) => v.len(),
            ColumnData::Float64(v) => v.len(),
            ColumnData::Bool(v) => v.len(),
            ColumnData::Utf8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DataType {
        match self {
            ColumnData::Int64(_) => DataType::Int64,
            ColumnData::Float64(_) => DataType::Float64,
            ColumnData::Bool(_) => DataType::Bool,
            ColumnData::Utf8(_) => DataType::Utf8,
        }
    }

    fn with_capacity(dtype: DataType, cap: usize) -> Self {
        match dtype {
            DataType::Int64 => ColumnData::Int64(Vec::with_capacity(cap)),
            DataType::Float64 => ColumnData::Float64(Vec::with_capacity(cap)),
            DataType::Bool => ColumnData::Bool(Vec::with_capacity(cap)),
            DataType::Utf8 => ColumnData::Utf8(Vec::with_capacity(cap)),
        }
    }
}

/// A typed column with a validity bitmap (1 = present, 0 = null).
#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    data: ColumnData,
    validity: Bitmap,
}

impl Column {
    /// Builds a column from a payload and an optional validity bitmap.
    ///
    /// Payloads under cleared validity bits are overwritten with the zero
    /// payload for the type.
    pub fn new(mut data: ColumnData, validity: Option<Bitmap>) -> Result<Self> {
        let validity = match validity {
            Some(v) => {
                if v.len() != data.len() {
                    return Err(Error::InvalidTable(format!(
                        "validity length {} != values length {}",
                        v.len(),
                        data.len()
                    )));
                }
                v
            }
            None => Bitmap::new_set(data.len()),
        };
        if validity.count_set() != validity.len() {
            zero_nulls(&mut data, &validity);
        }
        Ok(Column { data, validity })
    }

    pub fn int64(values: Vec<i64>) -> Self {
        let n = values.len();
        Column { data: ColumnData::Int64(values), validity: Bitmap::new_set(n) }
    }

    pub fn float64(values: Vec<f64>) -> Self {
        let n = values.len();
        Column { data: ColumnData::Float64(values), validity: Bitmap::new_set(n) }
    }

    pub fn boolean(values: Vec<bool>) -> Self {
        let n = values.len();
        Column { data: ColumnData::Bool(values), validity: Bitmap::new_set(n) }
    }

    pub fn utf8<S: Into<String>>(values: impl IntoIterator<Item = S>) -> Self {
        let values: Vec<String> = values.into_iter().map(Into::into).collect();
        let n = values.len();
        Column { data: ColumnData::Utf8(values), validity: Bitmap::new_set(n) }
    }

    pub fn from_opt_i64(values: impl IntoIterator<Item = Option<i64>>) -> Self {
        let mut b = ColumnBuilder::new(DataType::Int64, 0);
        for v in values {
            b.push_opt_i64(v);
        }
        b.finish()
    }

    pub fn from_opt_f64(values: impl IntoIterator<Item = Option<f64>>) -> Self {
        let mut b = ColumnBuilder::new(DataType::Float64, 0);
        for v in values {
            b.push_opt_f64(v);
        }
        b.finish()
    }

    pub fn from_opt_bool(values: impl IntoIterator<Item = Option<bool>>) -> Self {
        let mut b = ColumnBuilder::new(DataType::Bool, 0);
        for v in values {
            b.push_opt_bool(v);
        }
        b.finish()
    }

    pub fn from_opt_str<S: AsRef<str>>(values: impl IntoIterator<Item = Option<S>>) -> Self {
        let mut b = ColumnBuilder::new(DataType::Utf8, 0);
        for v in values {
            match v {
                Some(s) => b.push_str(s.as_ref()),
                None => b.push_null(),
            }
        }
        b.finish()
    }

    /// A column of `len` nulls.
    pub fn nulls(dtype: DataType, len: usize) -> Self {
        let data = match dtype {
            DataType::Int64 => ColumnData::Int64(vec![0; len]),
            DataType::Float64 => ColumnData::Float64(vec![0.0; len]),
            DataType::Bool => ColumnData::Bool(vec![false; len]),
            DataType::Utf8 => ColumnData::Utf8(vec![String::new(); len]),
        };
        Column { data, validity: Bitmap::new_unset(len) }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DataType {
        self.data.dtype()
    }

    /// Raw payload. Entries under cleared validity bits hold the zero payload.
    pub fn data(&self) -> &ColumnData {
        &self.data
    }

    pub fn validity(&self) -> &Bitmap {
        &self.validity
    }

    #[inline]
    pub fn is_valid(&self, row: usize) -> bool {
        self.validity.get(row)
    }

    pub fn null_count(&self) -> usize {
        self.validity.len() - self.validity.count_set()
    }

    /// Cell at `row`, [`Value::Null`] when the validity bit is cleared.
    #[inline]
    pub fn value(&self, row: usize) -> Value<'_> {
        if !self.validity.get(row) {
            return Value::Null;
        }
        match &self.data {
            ColumnData::Int64(v) => Value::Int64(v[row]),
            ColumnData::Float64(v) => Value::Float64(v[row]),
            ColumnData::Bool(v) => Value::Bool(v[row]),
            ColumnData::Utf8(v) => Value::Utf8(&v[row]),
        }
    }

    /// Raw Int64 payload; the cell must be present.
    #[inline]
    pub fn i64_at(&self, row: usize) -> i64 {
        debug_assert!(self.validity.get(row), "read of null cell at row {row}");
        match &self.data {
            ColumnData::Int64(v) => v[row],
            other => panic!("i64_at on {:?} column", other.dtype()),
        }
    }

    /// Raw Float64 payload; the cell must be present.
    #[inline]
    pub fn f64_at(&self, row: usize) -> f64 {
        debug_assert!(self.validity.get(row), "read of null cell at row {row}");
        match &self.data {
            ColumnData::Float64(v) => v[row],
            other => panic!("f64_at on {:?} column", other.dtype()),
        }
    }

    /// Numeric cell widened to f64, `None` for nulls and non-numeric columns.
    pub fn numeric_at(&self, row: usize) -> Option<f64> {
        match self.value(row) {
            Value::Int64(v) => Some(v as f64),
            Value::Float64(v) => Some(v),
            _ => None,
        }
    }

    /// Gathers rows by index. Indices must be in bounds.
    pub fn take(&self, indices: &[usize]) -> Column {
        let mut b = ColumnBuilder::new(self.dtype(), indices.len());
        for &i in indices {
            b.push_from(self, i);
        }
        b.finish()
    }

    /// Gathers rows by index, emitting a null for `None`.
    pub fn take_opt(&self, indices: &[Option<usize>]) -> Column {
        let mut b = ColumnBuilder::new(self.dtype(), indices.len());
        for i in indices {
            match i {
                Some(i) => b.push_from(self, *i),
                None => b.push_null(),
            }
        }
        b.finish()
    }

    pub fn slice(&self, start: usize, len: usize) -> Column {
        let idx: Vec<usize> = (start..start + len).collect();
        self.take(&idx)
    }

    pub fn iter(&self) -> impl Iterator<Item = Value<'_>> + '_ {
        (0..self.len()).map(move |i| self.value(i))
    }
}

fn zero_nulls(data: &mut ColumnData, validity: &Bitmap) {
    for i in 0..validity.len() {
        if validity.get(i) {
            continue;
        }
        match data {
            ColumnData::Int64(v) => v[i] = 0,
            ColumnData::Float64(v) => v[i] = 0.0,
            ColumnData::Bool(v) => v[i] = false,
            ColumnData::Utf8(v) => v[i].clear(),
        }
    }
}

/// Incremental column construction.
#[derive(Debug, Clone)]
pub struct ColumnBuilder {
    data: ColumnData,
    validity: Bitmap,
}

impl ColumnBuilder {
    pub fn new(dtype: DataType, capacity: usize) -> Self {
        ColumnBuilder {
            data: ColumnData::with_capacity(dtype, capacity),
            validity: Bitmap::with_capacity(capacity),
        }
    }

    pub fn dtype(&self) -> DataType {
        self.data.dtype()
    }

    pub fn len(&self) -> usize {
        self.validity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn push_null(&mut self) {
        match &mut self.data {
            ColumnData::Int64(v) => v.push(0),
            ColumnData::Float64(v) => v.push(0.0),
            ColumnData::Bool(v) => v.push(false),
            ColumnData::Utf8(v) => v.push(String::new()),
        }
        self.validity.push(false);
    }

    pub fn push_i64(&mut self, x: i64) {
        match &mut self.data {
            ColumnData::Int64(v) => v.push(x),
            other => panic!("push_i64 into {:?} builder", other.dtype()),
        }
        self.validity.push(true);
    }

    pub fn push_f64(&mut self, x: f64) {
        match &mut self.data {
            ColumnData::Float64(v) => v.push(x),
            other => panic!("push_f64 into {:?} builder", other.dtype()),
        }
        self.validity.push(true);
    }

    pub fn push_bool(&mut self, x: bool) {
        match &mut self.data {
            ColumnData::Bool(v) => v.push(x),
            other => panic!("push_bool into {:?} builder", other.dtype()),
        }
        self.validity.push(true);
    }

    pub fn push_str(&mut self, x: &str) {
        match &mut self.data {
            ColumnData::Utf8(v) => v.push(x.to_string()),
            other => panic!("push_str into {:?} builder", other.dtype()),
        }
        self.validity.push(true);
    }

    pub fn push_opt_i64(&mut self, x: Option<i64>) {
        match x {
            Some(x) => self.push_i64(x),
            None => self.push_null(),
        }
    }

    pub fn push_opt_f64(&mut self, x: Option<f64>) {
        match x {
            Some(x) => self.push_f64(x),
            None => self.push_null(),
        }
    }

    pub fn push_opt_bool(&mut self, x: Option<bool>) {
        match x {
            Some(x) => self.push_bool(x),
            None => self.push_null(),
        }
    }

    /// Appends a cell; the value's type must match the builder (or be null).
    pub fn push_value(&mut self, v: Value<'_>) -> Result<()> {
        match (v, self.dtype()) {
            (Value::Null, _) => self.push_null(),
            (Value::Int64(x), DataType::Int64) => self.push_i64(x),
            (Value::Float64(x), DataType::Float64) => self.push_f64(x),
            (Value::Bool(x), DataType::Bool) => self.push_bool(x),
            (Value::Utf8(x), DataType::Utf8) => self.push_str(x),
            (v, dt) => {
                return Err(Error::SchemaMismatch(format!("cannot push {v:?} into {dt} column")))
            }
        }
        Ok(())
    }

    /// Copies cell `row` of `src`, which must have the builder's type.
    #[inline]
    pub fn push_from(&mut self, src: &Column, row: usize) {
        if !src.is_valid(row) {
            self.push_null();
            return;
        }
        match (&mut self.data, &src.data) {
            (ColumnData::Int64(d), ColumnData::Int64(s)) => d.push(s[row]),
            (ColumnData::Float64(d), ColumnData::Float64(s)) => d.push(s[row]),
            (ColumnData::Bool(d), ColumnData::Bool(s)) => d.push(s[row]),
            (ColumnData::Utf8(d), ColumnData::Utf8(s)) => d.push(s[row].clone()),
            (d, s) => panic!("push_from {:?} into {:?} builder", s.dtype(), d.dtype()),
        }
        self.validity.push(true);
    }

    pub fn finish(self) -> Column {
        Column { data: self.data, validity: self.validity }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Field {
    pub name: String,
    pub dtype: DataType,
}

impl Field {
    pub fn new(name: impl Into<String>, dtype: DataType) -> Self {
        Field { name: name.into(), dtype }
    }
}

/// Ordered, uniquely named list of fields.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct Schema {
    fields: Vec<Field>,
}

impl Schema {
    pub fn new(fields: Vec<Field>) -> Result<Self> {
        for (i, f) in fields.iter().enumerate() {
            if fields[..i].iter().any(|g| g.name == f.name) {
                return Err(Error::DuplicateColumn(f.name.clone()));
            }
        }
        Ok(Schema { fields })
    }

    pub fn fields(&self) -> &[Field] {
        &self.fields
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn field(&self, i: usize) -> &Field {
        &self.fields[i]
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.fields
            .iter()
            .position(|f| f.name == name)
            .ok_or_else(|| Error::UnknownColumn(name.to_string()))
    }

    pub fn indices_of<S: AsRef<str>>(&self, names: &[S]) -> Result<Vec<usize>> {
        names.iter().map(|n| self.index_of(n.as_ref())).collect()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.fields.iter().map(|f| f.name.as_str())
    }
}

impl fmt::Display for Schema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("(")?;
        for (i, field) in self.fields.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{}: {}", field.name, field.dtype)?;
        }
        f.write_str(")")
    }
}

/// An immutable table: schema, one column per field, all of length `nrows`.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    schema: Schema,
    columns: Vec<Column>,
    nrows: usize,
}

impl Table {
    pub fn new(schema: Schema, columns: Vec<Column>) -> Result<Self> {
        if schema.len() != columns.len() {
            return Err(Error::InvalidTable(format!(
                "{} fields but {} columns",
                schema.len(),
                columns.len()
            )));
        }
        let nrows = columns.first().map_or(0, Column::len);
        for (f, c) in schema.fields().iter().zip(&columns) {
            if c.dtype() != f.dtype {
                return Err(Error::InvalidTable(format!(
                    "column `{}` declared {} but holds {}",
                    f.name,
                    f.dtype,
                    c.dtype()
                )));
            }
            if c.len() != nrows {
                return Err(Error::InvalidTable(format!(
                    "column `{}` has {} rows, expected {}",
                    f.name,
                    c.len(),
                    nrows
                )));
            }
        }
        Ok(Table { schema, columns, nrows })
    }

    /// Builds a table from `(name, column)` pairs.
    pub fn from_columns<S: Into<String>>(cols: Vec<(S, Column)>) -> Result<Self> {
        let mut fields = Vec::with_capacity(cols.len());
        let mut columns = Vec::with_capacity(cols.len());
        for (name, c) in cols {
            fields.push(Field::new(name, c.dtype()));
            columns.push(c);
        }
        Table::new(Schema::new(fields)?, columns)
    }

    pub fn empty(schema: Schema) -> Self {
        let columns = schema.fields().iter().map(|f| Column::nulls(f.dtype, 0)).collect();
        Table { schema, columns, nrows: 0 }
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn column(&self, i: usize) -> &Column {
        &self.columns[i]
    }

    pub fn column_by_name(&self, name: &str) -> Result<&Column> {
        Ok(&self.columns[self.schema.index_of(name)?])
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nrows == 0
    }

    pub fn value(&self, col: usize, row: usize) -> Value<'_> {
        self.columns[col].value(row)
    }

    pub fn row(&self, row: usize) -> Vec<Value<'_>> {
        self.columns.iter().map(|c| c.value(row)).collect()
    }

    /// Gathers rows by index; duplicates are allowed.
    pub fn take(&self, indices: &[usize]) -> Result<Table> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.nrows) {
            return Err(Error::IndexOutOfBounds { index: bad, nrows: self.nrows });
        }
        Ok(self.take_unchecked(indices))
    }

    pub(crate) fn take_unchecked(&self, indices: &[usize]) -> Table {
        Table {
            schema: self.schema.clone(),
            columns: self.columns.iter().map(|c| c.take(indices)).collect(),
            nrows: indices.len(),
        }
    }

    /// Contiguous row range `[start, start + len)`.
    pub fn slice(&self, start: usize, len: usize) -> Result<Table> {
        if start + len > self.nrows {
            return Err(Error::IndexOutOfBounds { index: start + len, nrows: self.nrows });
        }
        let idx: Vec<usize> = (start..start + len).collect();
        Ok(self.take_unchecked(&idx))
    }

    /// Splits into `k` contiguous chunks whose sizes differ by at most one.
    pub fn split(&self, k: usize) -> Vec<Table> {
        let k = k.max(1);
        (0..k)
            .map(|i| {
                let lo = i * self.nrows / k;
                let hi = (i + 1) * self.nrows / k;
                self.slice(lo, hi - lo).expect("in bounds")
            })
            .collect()
    }

    /// Replaces (by position) or appends columns, keeping the row count.
    pub(crate) fn with_columns(schema: Schema, columns: Vec<Column>, nrows: usize) -> Table {
        debug_assert!(columns.iter().all(|c| c.len() == nrows));
        Table { schema, columns, nrows }
    }

    pub fn into_parts(self) -> (Schema, Vec<Column>) {
        (self.schema, self.columns)
    }
}

/// Vertically concatenates tables sharing `schema`, in argument order.
pub fn concat<'a>(schema: &Schema, tables: impl IntoIterator<Item = &'a Table>) -> Result<Table> {
    let tables: Vec<&Table> = tables.into_iter().collect();
    for t in &tables {
        if t.schema() != schema {
            return Err(Error::SchemaMismatch(format!(
                "concat expected {schema}, found {}",
                t.schema()
            )));
        }
    }
    let nrows: usize = tables.iter().map(|t| t.nrows()).sum();
    let mut columns = Vec::with_capacity(schema.len());
    for (ci, f) in schema.fields().iter().enumerate() {
        let mut b = ColumnBuilder::new(f.dtype, nrows);
        for t in &tables {
            let c = t.column(ci);
            for r in 0..c.len() {
                b.push_from(c, r);
            }
        }
        columns.push(b.finish());
    }
    Ok(Table::with_columns(schema.clone(), columns, nrows))
}

/// Concatenation of a non-empty list, using the first table's schema.
pub fn concat_all(tables: &[Table]) -> Result<Table> {
    let first = tables
        .first()
        .ok_or_else(|| Error::InvalidTable("concat of an empty list needs a schema".into()))?;
    concat(first.schema(), tables)
}
