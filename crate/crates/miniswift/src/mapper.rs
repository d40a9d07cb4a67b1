//! Mappers bind logical dataset structure to physical files. Input mode
//! enumerates existing data into a resolved node tree; output mode attaches
//! a naming scheme so produced files land at deterministic paths.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::node::{NodeId, NodeStore, OutScheme, PrimValue, Step};
use crate::types::{Prim, Ty, TypeTable};

#[derive(Debug, Clone, PartialEq)]
pub enum ParamValue {
    Str(String),
    Int(i64),
    Bool(bool),
}

impl ParamValue {
    pub fn as_str(&self) -> Option<&str> {
        match self {
            ParamValue::Str(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            ParamValue::Int(n) => Some(*n),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            ParamValue::Bool(b) => Some(*b),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapMode {
    Input,
    Output,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapError {
    pub mapper: String,
    pub message: String,
}

impl fmt::Display for MapError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.mapper, self.message)
    }
}

impl std::error::Error for MapError {}

/// What a mapper computed for a binding. Input mappers return `Tree`;
/// output mappers return a scheme (or a fully targeted tree for fixed,
/// single-file outputs).
#[derive(Debug, Clone)]
pub enum Mapped {
    Tree(MapValue),
    Scheme(OutScheme),
}

#[derive(Debug, Clone, PartialEq)]
pub enum MapValue {
    File(String),
    Prim(PrimValue),
    Struct(Vec<(String, MapValue)>),
    Array(Vec<MapValue>),
}

pub struct MapRequest<'a> {
    pub params: &'a BTreeMap<String, ParamValue>,
    pub declared: &'a Ty,
    pub mode: MapMode,
    /// Directory against which relative locations resolve.
    pub base: &'a Path,
    pub table: &'a TypeTable,
}

pub type MapperFn = Arc<dyn Fn(&MapRequest) -> Result<Mapped, MapError> + Send + Sync>;

pub struct MapperRegistry {
    mappers: BTreeMap<String, MapperFn>,
}

impl MapperRegistry {
    /// Registry with fs_mapper (alias run_mapper), csv_mapper, file_mapper,
    /// and string_mapper installed.
    pub fn with_builtins() -> Self {
        let mut r = MapperRegistry { mappers: BTreeMap::new() };
        let fs: MapperFn = Arc::new(fs_mapper);
        r.mappers.insert("fs_mapper".into(), Arc::clone(&fs));
        r.mappers.insert("run_mapper".into(), fs);
        r.register("csv_mapper", Arc::new(csv_mapper)).unwrap();
        r.register("file_mapper", Arc::new(file_mapper)).unwrap();
        r.register("string_mapper", Arc::new(string_mapper)).unwrap();
        r
    }

    pub fn register(&mut self, name: &str, f: MapperFn) -> Result<(), MapError> {
        if self.mappers.contains_key(name) {
            return Err(MapError { mapper: name.into(), message: "duplicate mapper".into() });
        }
        self.mappers.insert(name.to_string(), f);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&MapperFn> {
        self.mappers.get(name)
    }

    pub fn run(&self, name: &str, req: &MapRequest) -> Result<Mapped, MapError> {
        let f = self.get(name).ok_or_else(|| MapError {
            mapper: name.into(),
            message: "unknown mapper".into(),
        })?;
        f(req)
    }
}

/// Maps a binding and instantiates the result as a fresh node tree rooted
/// at a new node named `name`. Input trees come back resolved; output
/// bindings carry their naming scheme for later target assignment.
pub fn map_dataset(
    registry: &MapperRegistry,
    store: &mut NodeStore,
    name: &str,
    mapper: &str,
    params: &BTreeMap<String, ParamValue>,
    declared: &Ty,
    mode: MapMode,
    base: &Path,
    table: &TypeTable,
) -> Result<NodeId, MapError> {
    let req = MapRequest { params, declared, mode, base, table };
    let mapped = registry.run(mapper, &req)?;
    let root = store.create(name, declared.clone(), table);
    match mapped {
        Mapped::Tree(value) => {
            instantiate(store, root, &value, mode, mapper, table)?;
        }
        Mapped::Scheme(scheme) => {
            store.get(root).scheme.set(scheme).ok();
        }
    }
    Ok(root)
}

/// Fills the node tree under `root` from a mapper's tree, checking shape
/// against the declared type as it goes. Input leaves resolve immediately;
/// output leaves only receive their target path.
pub fn instantiate(
    store: &mut NodeStore,
    root: NodeId,
    value: &MapValue,
    mode: MapMode,
    mapper: &str,
    table: &TypeTable,
) -> Result<(), MapError> {
    let shape_err = |msg: String| MapError { mapper: mapper.into(), message: msg };
    let ty = store.get(root).ty.clone();
    match (value, &ty) {
        (MapValue::File(path), Ty::File(_)) => {
            store.get(root).set_target(path.clone()).map_err(|e| shape_err(e.message))?;
            if mode == MapMode::Input {
                store.get(root).resolve_file().map_err(|e| shape_err(e.message))?;
            }
            Ok(())
        }
        (MapValue::Prim(v), Ty::Prim(p)) => {
            let ok = matches!(
                (v, p),
                (PrimValue::Int(_), Prim::Int)
                    | (PrimValue::Float(_), Prim::Float)
                    | (PrimValue::Str(_), Prim::Str)
                    | (PrimValue::Bool(_), Prim::Bool)
            );
            if !ok {
                return Err(shape_err(format!(
                    "value {:?} does not fit declared {}",
                    v,
                    ty.display()
                )));
            }
            store.get(root).resolve_prim(v.clone()).map_err(|e| shape_err(e.message))?;
            Ok(())
        }
        (MapValue::Struct(fields), Ty::Struct(sname)) => {
            let declared_fields = table
                .fields(sname)
                .ok_or_else(|| shape_err(format!("unknown struct {}", sname)))?;
            if fields.len() != declared_fields.len() {
                return Err(shape_err(format!(
                    "struct {} expects {} fields, mapper produced {}",
                    sname,
                    declared_fields.len(),
                    fields.len()
                )));
            }
            for (fname, fval) in fields {
                let child = store.field(root, fname).ok_or_else(|| {
                    shape_err(format!("struct {} has no field {}", sname, fname))
                })?;
                instantiate(store, child, fval, mode, mapper, table)?;
            }
            Ok(())
        }
        (MapValue::Array(elems), Ty::Array(_)) => {
            for (i, e) in elems.iter().enumerate() {
                let child = store
                    .element_or_create(root, i, table)
                    .map_err(|e| shape_err(e.message))?;
                instantiate(store, child, e, mode, mapper, table)?;
            }
            store.close_array(root, elems.len()).map_err(|e| shape_err(e.message))?;
            Ok(())
        }
        _ => Err(shape_err(format!(
            "mapper output shape does not match declared {}",
            ty.display()
        ))),
    }
}

fn str_param<'a>(req: &'a MapRequest, key: &str) -> Option<&'a str> {
    req.params.get(key).and_then(|v| v.as_str())
}

fn resolve_base(base: &Path, loc: &str) -> PathBuf {
    let p = Path::new(loc);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn joined(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

/// Suffix for a struct field: explicit `<field>=".ext"` param, else
/// `.<field>`.
fn field_suffix(req: &MapRequest, field: &str) -> String {
    match str_param(req, field) {
        Some(s) => s.to_string(),
        None => format!(".{}", field),
    }
}

/// Groups directory entries sharing a prefix and stem into struct elements
/// (input), or yields the `<prefix>_<index>` naming scheme (output).
fn fs_mapper(req: &MapRequest) -> Result<Mapped, MapError> {
    let err = |m: String| MapError { mapper: "fs_mapper".into(), message: m };
    let location = str_param(req, "location").unwrap_or(".").to_string();
    let prefix = str_param(req, "prefix").unwrap_or("").to_string();

    // Unwrap a struct whose single field is the payload array, as in
    // `type Run { Volume v[]; }`.
    let (wrap_field, arr_ty) = match req.declared {
        Ty::Struct(sname) => {
            let fields = req.table.fields(sname).ok_or_else(|| err(format!("unknown struct {}", sname)))?;
            match fields {
                [(fname, fty @ Ty::Array(_))] => (Some(fname.clone()), fty.clone()),
                _ => {
                    return Err(err(format!(
                        "declared struct {} is not a single-array wrapper",
                        sname
                    )))
                }
            }
        }
        t @ Ty::Array(_) => (None, t.clone()),
        other => return Err(err(format!("cannot map declared {}", other.display()))),
    };
    let Ty::Array(elem_ty) = &arr_ty else { unreachable!() };

    if req.mode == MapMode::Output {
        let mut suffixes = BTreeMap::new();
        if let Ty::Struct(sname) = elem_ty.as_ref() {
            for (fname, _) in req.table.fields(sname).into_iter().flatten() {
                suffixes.insert(fname.clone(), field_suffix(req, fname));
            }
        }
        return Ok(Mapped::Scheme(OutScheme::FsDir { location, prefix, suffixes }));
    }

    let dir = resolve_base(req.base, &location);
    let mut entries: Vec<String> = std::fs::read_dir(&dir)
        .map_err(|e| err(format!("cannot read {}: {}", dir.display(), e)))?
        .filter_map(|r| r.ok())
        .filter(|e| e.file_type().map(|t| t.is_file()).unwrap_or(false))
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with(&prefix))
        .collect();
    entries.sort();

    let elems = match elem_ty.as_ref() {
        Ty::Struct(sname) => {
            let fields: Vec<(String, String)> = req
                .table
                .fields(sname)
                .ok_or_else(|| err(format!("unknown struct {}", sname)))?
                .iter()
                .map(|(fname, _)| (fname.clone(), field_suffix(req, fname)))
                .collect();
            // stem → field → file name
            let mut groups: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
            for name in &entries {
                for (fname, suffix) in &fields {
                    if let Some(stem) = name.strip_suffix(suffix.as_str()) {
                        groups.entry(stem.to_string()).or_default().insert(fname.clone(), name.clone());
                    }
                }
            }
            let mut elems = Vec::new();
            for (stem, members) in &groups {
                let mut fvals = Vec::new();
                for (fname, _) in &fields {
                    let file = members.get(fname).ok_or_else(|| {
                        err(format!("incomplete group: {} is missing {}", stem, field_suffix(req, fname)))
                    })?;
                    fvals.push((fname.clone(), MapValue::File(joined(&dir, file))));
                }
                elems.push(MapValue::Struct(fvals));
            }
            elems
        }
        Ty::File(_) => {
            let suffix = str_param(req, "suffix").unwrap_or("").to_string();
            entries
                .iter()
                .filter(|n| n.ends_with(&suffix))
                .map(|n| MapValue::File(joined(&dir, n)))
                .collect()
        }
        other => return Err(err(format!("cannot enumerate elements of {}", other.display()))),
    };

    let arr = MapValue::Array(elems);
    Ok(Mapped::Tree(match wrap_field {
        Some(f) => MapValue::Struct(vec![(f, arr)]),
        None => arr,
    }))
}

/// Rows of a delimited table become array elements, columns binding to
/// struct fields positionally. Order of business: header line first (when
/// header=true), then `skip` lines, then data.
fn csv_mapper(req: &MapRequest) -> Result<Mapped, MapError> {
    let err = |m: String| MapError { mapper: "csv_mapper".into(), message: m };
    if req.mode == MapMode::Output {
        return Err(err("cannot map an output dataset".into()));
    }
    let file = str_param(req, "file").ok_or_else(|| err("missing file parameter".into()))?;
    let path = resolve_base(req.base, file);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| err(format!("cannot read {}: {}", path.display(), e)))?;
    let csv_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();

    let elem_ty = match req.declared {
        Ty::Array(e) => e.as_ref().clone(),
        other => return Err(err(format!("declared {} is not an array", other.display()))),
    };
    let fields: Vec<(String, Ty)> = match &elem_ty {
        Ty::Struct(sname) => req
            .table
            .fields(sname)
            .ok_or_else(|| err(format!("unknown struct {}", sname)))?
            .to_vec(),
        other => return Err(err(format!("array element {} is not a struct", other.display()))),
    };

    let skip = req.params.get("skip").and_then(|v| v.as_int()).unwrap_or(0).max(0) as usize;
    let header = req.params.get("header").and_then(|v| v.as_bool()).unwrap_or(false);
    let hdelim = str_param(req, "hdelim");
    let delim = str_param(req, "delim");

    let mut lines = text.lines().enumerate();

    if header {
        let (line_no, line) = lines
            .next()
            .ok_or_else(|| err("header expected but file is empty".into()))?;
        let cols: Vec<&str> = split_line(line, hdelim.or(delim));
        if cols.len() != fields.len() {
            return Err(err(format!(
                "line {}: header has {} columns, struct has {} fields",
                line_no + 1,
                cols.len(),
                fields.len()
            )));
        }
        for (col, (fname, _)) in cols.iter().zip(&fields) {
            if !col.trim().eq_ignore_ascii_case(fname) {
                return Err(err(format!(
                    "line {}: header column {:?} does not match field {:?}",
                    line_no + 1,
                    col.trim(),
                    fname
                )));
            }
        }
    }

    let mut rows = Vec::new();
    for (line_no, line) in lines.skip(skip) {
        if line.trim().is_empty() {
            continue;
        }
        let cols = split_line(line, delim.or(hdelim));
        if cols.len() != fields.len() {
            return Err(err(format!(
                "line {}: row has {} columns, struct has {} fields",
                line_no + 1,
                cols.len(),
                fields.len()
            )));
        }
        let mut fvals = Vec::new();
        for (raw, (fname, fty)) in cols.iter().zip(&fields) {
            let cell = raw.trim();
            let v = match fty {
                Ty::Prim(Prim::Int) => MapValue::Prim(PrimValue::Int(cell.parse().map_err(
                    |_| err(format!("line {}: field {} is not an int: {:?}", line_no + 1, fname, cell)),
                )?)),
                Ty::Prim(Prim::Float) => MapValue::Prim(PrimValue::Float(cell.parse().map_err(
                    |_| err(format!("line {}: field {} is not a float: {:?}", line_no + 1, fname, cell)),
                )?)),
                Ty::Prim(Prim::Str) => MapValue::Prim(PrimValue::Str(cell.to_string())),
                Ty::Prim(Prim::Bool) => MapValue::Prim(PrimValue::Bool(cell.parse().map_err(
                    |_| err(format!("line {}: field {} is not a boolean: {:?}", line_no + 1, fname, cell)),
                )?)),
                Ty::File(_) => {
                    let p = Path::new(cell);
                    if p.is_absolute() {
                        MapValue::File(cell.to_string())
                    } else {
                        MapValue::File(joined(&csv_dir, cell))
                    }
                }
                other => {
                    return Err(err(format!(
                        "field {} has unmappable type {}",
                        fname,
                        other.display()
                    )))
                }
            };
            fvals.push((fname.clone(), v));
        }
        rows.push(MapValue::Struct(fvals));
    }
    Ok(Mapped::Tree(MapValue::Array(rows)))
}

/// Splits on the given delimiter, or on runs of whitespace when none given.
fn split_line<'a>(line: &'a str, delim: Option<&str>) -> Vec<&'a str> {
    let line = line.trim_end();
    match delim {
        Some(d) if !d.is_empty() && line.contains(d) => line.split(d).collect(),
        _ => line.split_whitespace().collect(),
    }
}

/// One fixed file. Input mode requires it to exist.
fn file_mapper(req: &MapRequest) -> Result<Mapped, MapError> {
    let err = |m: String| MapError { mapper: "file_mapper".into(), message: m };
    let file = str_param(req, "file").ok_or_else(|| err("missing file parameter".into()))?;
    if !matches!(req.declared, Ty::File(_)) {
        return Err(err(format!("declared {} is not a file type", req.declared.display())));
    }
    let path = resolve_base(req.base, file);
    match req.mode {
        MapMode::Input => {
            if !path.is_file() {
                return Err(err(format!("no such file: {}", path.display())));
            }
            Ok(Mapped::Tree(MapValue::File(path.to_string_lossy().into_owned())))
        }
        MapMode::Output => {
            Ok(Mapped::Scheme(OutScheme::SingleFile { path: path.to_string_lossy().into_owned() }))
        }
    }
}

/// Literal string value, no file behind it.
fn string_mapper(req: &MapRequest) -> Result<Mapped, MapError> {
    let err = |m: String| MapError { mapper: "string_mapper".into(), message: m };
    if req.mode == MapMode::Output {
        return Err(err("cannot map an output dataset".into()));
    }
    let value = str_param(req, "value").ok_or_else(|| err("missing value parameter".into()))?;
    if *req.declared != Ty::STR {
        return Err(err(format!("declared {} is not string", req.declared.display())));
    }
    Ok(Mapped::Tree(MapValue::Prim(PrimValue::Str(value.to_string()))))
}

/// Target path for a file leaf under an output scheme. `steps` lead from
/// the scheme's root node down to the leaf.
pub fn output_target(scheme: &OutScheme, steps: &[Step]) -> String {
    match scheme {
        OutScheme::SingleFile { path } => path.clone(),
        OutScheme::FsDir { location, prefix, suffixes } => {
            let mut index = None;
            let mut field = None;
            for s in steps {
                match s {
                    Step::Index(i) => {
                        index = Some(*i);
                        field = None;
                    }
                    Step::Field(f) => field = Some(f.clone()),
                    Step::Root(_) => {}
                }
            }
            // Field recorded before the index still names the payload, as
            // in AirVector.a[i] where the leaf is the element itself.
            if field.is_none() {
                for s in steps {
                    if let Step::Field(f) = s {
                        field = Some(f.clone());
                    }
                }
            }
            let mut name = prefix.clone();
            if let Some(i) = index {
                name.push_str(&format!("_{:04}", i));
            }
            match field {
                Some(f) => {
                    let suffix = suffixes.get(&f).cloned().unwrap_or_else(|| format!(".{}", f));
                    name.push_str(&suffix);
                }
                None => name.push_str(".dat"),
            }
            Path::new(location).join(name).to_string_lossy().into_owned()
        }
    }
}
