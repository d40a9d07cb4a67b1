//! Logical data types: the abstract side of the two-level data model.
//!
//! Struct types are nominal; arrays and primitives compare structurally. A
//! type with an empty body (`type Image {}`) names an opaque file.

use std::collections::BTreeMap;

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Prim {
    Int,
    Float,
    Str,
    Bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Ty {
    Prim(Prim),
    /// Opaque file type; the declared name is kept for display and errors.
    File(String),
    /// Nominal struct; fields live in the `TypeTable`.
    Struct(String),
    Array(Box<Ty>),
}

impl Ty {
    pub const INT: Ty = Ty::Prim(Prim::Int);
    pub const FLOAT: Ty = Ty::Prim(Prim::Float);
    pub const STR: Ty = Ty::Prim(Prim::Str);
    pub const BOOL: Ty = Ty::Prim(Prim::Bool);

    pub fn array_of(elem: Ty) -> Ty {
        Ty::Array(Box::new(elem))
    }

    pub fn is_file(&self) -> bool {
        matches!(self, Ty::File(_))
    }

    pub fn is_prim(&self) -> bool {
        matches!(self, Ty::Prim(_))
    }

    pub fn display(&self) -> String {
        match self {
            Ty::Prim(Prim::Int) => "int".into(),
            Ty::Prim(Prim::Float) => "float".into(),
            Ty::Prim(Prim::Str) => "string".into(),
            Ty::Prim(Prim::Bool) => "boolean".into(),
            Ty::File(n) | Ty::Struct(n) => n.clone(),
            Ty::Array(inner) => format!("{}[]", inner.display()),
        }
    }
}

/// Whether `value` may be bound to a slot of type `target`. Nominal for
/// structs and opaque files, structural for arrays and primitives.
pub fn compatible(target: &Ty, value: &Ty) -> bool {
    match (target, value) {
        (Ty::Array(a), Ty::Array(b)) => compatible(a, b),
        _ => target == value,
    }
}

/// Declared types of one script, indexed by name. Builtin primitives are not
/// stored here; `resolve` knows them.
#[derive(Debug, Clone, Default, Serialize)]
pub struct TypeTable {
    structs: BTreeMap<String, Vec<(String, Ty)>>,
    files: Vec<String>,
}

impl TypeTable {
    pub fn declare_file(&mut self, name: &str) -> bool {
        if self.known(name) {
            return false;
        }
        self.files.push(name.to_string());
        true
    }

    pub fn declare_struct(&mut self, name: &str, fields: Vec<(String, Ty)>) -> bool {
        if self.known(name) {
            return false;
        }
        self.structs.insert(name.to_string(), fields);
        true
    }

    /// Second pass of declaration: fill in fields once all names are known.
    pub fn declare_struct_fields(&mut self, name: &str, fields: Vec<(String, Ty)>) {
        if let Some(slot) = self.structs.get_mut(name) {
            *slot = fields;
        }
    }

    pub fn known(&self, name: &str) -> bool {
        self.structs.contains_key(name) || self.files.iter().any(|f| f == name)
    }

    pub fn is_reserved(name: &str) -> bool {
        matches!(name, "int" | "float" | "string" | "boolean" | "date")
    }

    /// Resolves a type name from source. `date` is carried as a string.
    pub fn resolve(&self, name: &str) -> Option<Ty> {
        match name {
            "int" => Some(Ty::INT),
            "float" => Some(Ty::FLOAT),
            "string" | "date" => Some(Ty::STR),
            "boolean" => Some(Ty::BOOL),
            _ if self.structs.contains_key(name) => Some(Ty::Struct(name.to_string())),
            _ if self.files.iter().any(|f| f == name) => Some(Ty::File(name.to_string())),
            _ => None,
        }
    }

    pub fn fields(&self, struct_name: &str) -> Option<&[(String, Ty)]> {
        self.structs.get(struct_name).map(|v| v.as_slice())
    }

    pub fn field_ty(&self, struct_name: &str, field: &str) -> Option<&Ty> {
        self.structs.get(struct_name)?.iter().find(|(n, _)| n == field).map(|(_, t)| t)
    }

    /// True for structs whose fields are all opaque files (not arrays or
    /// nested structs).
    pub fn is_struct_of_files(&self, ty: &Ty) -> bool {
        match ty {
            Ty::Struct(name) => self
                .fields(name)
                .map(|fs| !fs.is_empty() && fs.iter().all(|(_, t)| t.is_file()))
                .unwrap_or(false),
            _ => false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> TypeTable {
        let mut t = TypeTable::default();
        t.declare_file("Image");
        t.declare_file("Header");
        t.declare_struct(
            "Volume",
            vec![("img".into(), Ty::File("Image".into())), ("hdr".into(), Ty::File("Header".into()))],
        );
        t.declare_struct("Twin", vec![("img".into(), Ty::File("Image".into())), ("hdr".into(), Ty::File("Header".into()))]);
        t
    }

    #[test]
    fn structs_are_nominal() {
        // Identical field sets, still distinct types.
        let a = Ty::Struct("Volume".into());
        let b = Ty::Struct("Twin".into());
        assert!(!compatible(&a, &b));
        assert!(compatible(&a, &a.clone()));
    }

    #[test]
    fn arrays_compare_structurally() {
        let a = Ty::array_of(Ty::Struct("Volume".into()));
        let b = Ty::array_of(Ty::Struct("Volume".into()));
        assert!(compatible(&a, &b));
        let c = Ty::array_of(Ty::Struct("Twin".into()));
        assert!(!compatible(&a, &c));
        assert!(compatible(&Ty::array_of(Ty::INT), &Ty::array_of(Ty::INT)));
    }

    #[test]
    fn opaque_files_are_nominal() {
        assert!(!compatible(&Ty::File("Image".into()), &Ty::File("Header".into())));
    }

    #[test]
    fn resolve_builtins_and_declared() {
        let t = table();
        assert_eq!(t.resolve("int"), Some(Ty::INT));
        assert_eq!(t.resolve("date"), Some(Ty::STR));
        assert_eq!(t.resolve("Volume"), Some(Ty::Struct("Volume".into())));
        assert_eq!(t.resolve("Image"), Some(Ty::File("Image".into())));
        assert_eq!(t.resolve("Nope"), None);
    }

    #[test]
    fn struct_of_files_detection() {
        let mut t = table();
        t.declare_struct("Mixed", vec![("n".into(), Ty::INT), ("img".into(), Ty::File("Image".into()))]);
        assert!(t.is_struct_of_files(&Ty::Struct("Volume".into())));
        assert!(!t.is_struct_of_files(&Ty::Struct("Mixed".into())));
        assert!(!t.is_struct_of_files(&Ty::File("Image".into())));
    }
}
