// SPDX-License-Identifier: (Apache-2.0 OR MIT)

//! Kernel objects, context mirroring and synchronization.
//!
//! A [`ContextSpec`] maps offsets of the guest-visible context onto dotted paths through
//! kernel objects. Scalar paths of any depth are flattened into the context. A path that
//! ends on a reference field becomes an 8-byte context slot holding a pointer to a heap copy
//! of the referenced object, laid out exactly like the kernel object.
//!
//! [`prepare_context`] copies the selected fields into the sandbox and returns a
//! [`SyncTable`] that tracks dirty entries and object translations. [`mte_min_tag`] is the
//! alternative that tags the accessed granules of the real objects instead of copying.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory::{strip_tag, with_tag, MemError, SimAddressSpace, GRANULE};
use crate::sandbox::{Sandbox, SandboxError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ContextError {
    #[error("path `{0}` does not resolve through the declared objects")]
    UnresolvedPath(String),
    #[error("invalid object `{object}`: {reason}")]
    InvalidObject { object: String, reason: String },
    #[error("invalid context spec: {0}")]
    InvalidSpec(String),
    #[error("null reference while resolving `{0}`")]
    NullReference(String),
    #[error("context needs {requested} bytes, {available} available")]
    OutOfSandboxMemory { requested: u64, available: u64 },
    #[error("address {0:#x} is not a registered sandboxed object")]
    UnknownObject(u64),
    #[error("granule at {0:#x} is already tagged by another tagging")]
    TagOverlap(u64),
    #[error(transparent)]
    Sandbox(SandboxError),
    #[error(transparent)]
    Memory(#[from] MemError),
}

impl From<SandboxError> for ContextError {
    fn from(e: SandboxError) -> Self {
        match e {
            SandboxError::OutOfSandboxMemory { requested, available } => {
                ContextError::OutOfSandboxMemory { requested, available }
            }
            other => ContextError::Sandbox(other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    Scalar,
    Ref,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldDescriptor {
    pub name: String,
    pub offset: u64,
    pub size: u64,
    pub kind: FieldKind,
    /// Initial value of a scalar field.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub value: u64,
    /// Object referenced by a `ref` field.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
}

fn is_zero(v: &u64) -> bool {
    *v == 0
}

impl FieldDescriptor {
    pub fn scalar(name: &str, offset: u64, size: u64, value: u64) -> Self {
        FieldDescriptor { name: name.into(), offset, size, kind: FieldKind::Scalar, value, target: None }
    }

    pub fn reference(name: &str, offset: u64, target: &str) -> Self {
        FieldDescriptor {
            name: name.into(),
            offset,
            size: 8,
            kind: FieldKind::Ref,
            value: 0,
            target: Some(target.into()),
        }
    }

    pub fn end(&self) -> u64 {
        self.offset + self.size
    }
}

/// Layout of a kernel object together with the initial values of its single instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelObjectDescriptor {
    pub name: String,
    pub size: u64,
    pub fields: Vec<FieldDescriptor>,
}

impl KernelObjectDescriptor {
    pub fn field(&self, name: &str) -> Option<&FieldDescriptor> {
        self.fields.iter().find(|f| f.name == name)
    }

    pub fn validate(&self) -> Result<(), ContextError> {
        let bad = |reason: String| ContextError::InvalidObject { object: self.name.clone(), reason };
        if self.size == 0 {
            return Err(bad("zero size".into()));
        }
        let mut sorted: Vec<&FieldDescriptor> = self.fields.iter().collect();
        sorted.sort_by_key(|f| f.offset);
        for f in &sorted {
            if !matches!(f.size, 1 | 2 | 4 | 8) {
                return Err(bad(format!("field `{}` has size {}", f.name, f.size)));
            }
            if f.offset % f.size != 0 {
                return Err(bad(format!("field `{}` is not naturally aligned", f.name)));
            }
            if f.end() > self.size {
                return Err(bad(format!("field `{}` extends past the object", f.name)));
            }
            match f.kind {
                FieldKind::Ref if f.size != 8 || f.target.is_none() => {
                    return Err(bad(format!("reference `{}` needs size 8 and a target", f.name)));
                }
                FieldKind::Scalar if f.size < 8 && f.value >> (8 * f.size) != 0 => {
                    return Err(bad(format!("value of `{}` does not fit", f.name)));
                }
                _ => {}
            }
        }
        for w in sorted.windows(2) {
            if w[0].end() > w[1].offset {
                return Err(bad(format!("fields `{}` and `{}` overlap", w[0].name, w[1].name)));
            }
        }
        let mut names = BTreeSet::new();
        if !self.fields.iter().all(|f| names.insert(&f.name)) {
            return Err(bad("duplicate field name".into()));
        }
        Ok(())
    }

    /// Scalar fields overlapping `[off, off+len)`, by index.
    fn scalars_overlapping(&self, off: u64, len: u64) -> impl Iterator<Item = usize> + '_ {
        self.fields
            .iter()
            .enumerate()
            .filter(move |(_, f)| f.kind == FieldKind::Scalar && f.offset < off + len && off < f.end())
            .map(|(i, _)| i)
    }
}

/// Placed kernel objects, keyed by name.
#[derive(Debug, Clone, Default)]
pub struct ObjectStore {
    descriptors: BTreeMap<String, KernelObjectDescriptor>,
    addrs: BTreeMap<String, u64>,
}

impl ObjectStore {
    /// Validates and allocates every object, writing initial values and reference addresses.
    pub fn place(space: &mut SimAddressSpace, objects: &[KernelObjectDescriptor]) -> Result<Self, ContextError> {
        let mut store = ObjectStore::default();
        for o in objects {
            o.validate()?;
            if store.descriptors.insert(o.name.clone(), o.clone()).is_some() {
                return Err(ContextError::InvalidObject { object: o.name.clone(), reason: "duplicate name".into() });
            }
        }
        for o in objects {
            for f in o.fields.iter().filter(|f| f.kind == FieldKind::Ref) {
                let t = f.target.as_deref().unwrap_or_default();
                if !store.descriptors.contains_key(t) {
                    return Err(ContextError::InvalidObject {
                        object: o.name.clone(),
                        reason: format!("unknown target `{t}`"),
                    });
                }
            }
        }
        for o in objects {
            let addr = space.alloc(o.size.next_multiple_of(GRANULE), GRANULE)?;
            store.addrs.insert(o.name.clone(), addr);
        }
        for o in objects {
            let addr = store.addrs[&o.name];
            for f in &o.fields {
                let v = match f.kind {
                    FieldKind::Scalar => f.value,
                    FieldKind::Ref => store.addrs[f.target.as_deref().unwrap_or_default()],
                };
                space.host_write(addr + f.offset, f.size, v).expect("object inside arena");
            }
        }
        Ok(store)
    }

    pub fn descriptor(&self, name: &str) -> Option<&KernelObjectDescriptor> {
        self.descriptors.get(name)
    }

    pub fn addr(&self, name: &str) -> Option<u64> {
        self.addrs.get(name).copied()
    }

    /// `(name, address, size)` of every object.
    pub fn objects(&self) -> impl Iterator<Item = (&str, u64, u64)> {
        self.addrs.iter().map(|(n, a)| (n.as_str(), *a, self.descriptors[n].size))
    }

    /// The object containing `addr`, if any.
    pub fn object_at(&self, addr: u64) -> Option<(&str, u64, &KernelObjectDescriptor)> {
        let a = strip_tag(addr);
        self.addrs
            .iter()
            .map(|(n, base)| (n.as_str(), *base, &self.descriptors[n]))
            .find(|(_, base, d)| a >= *base && a < base + d.size)
    }

    pub fn descriptors(&self) -> impl Iterator<Item = &KernelObjectDescriptor> {
        self.descriptors.values()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FieldAccess {
    #[serde(rename = "read")]
    Read,
    #[serde(rename = "write")]
    Write,
    #[serde(rename = "rw")]
    ReadWrite,
}

impl FieldAccess {
    pub fn writable(self) -> bool {
        !matches!(self, FieldAccess::Read)
    }

    pub fn readable(self) -> bool {
        !matches!(self, FieldAccess::Write)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MirroredField {
    pub ctx_offset: u64,
    pub kernel_path: String,
    pub size: u64,
    pub access: FieldAccess,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextSpec {
    pub name: String,
    /// Kernel object handed to the program.
    pub root: String,
    pub fields: Vec<MirroredField>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum ResolvedKind {
    Scalar,
    /// Pointer slot to a copy of the named object.
    RefSlot {
        target: String,
    },
}

/// A mirrored field with its path resolved to reference offsets and the leaf location.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ResolvedField {
    pub ctx_offset: u64,
    pub size: u64,
    pub access: FieldAccess,
    pub path: String,
    /// Offsets of the reference fields followed from the root, outermost first.
    pub chain: Vec<u64>,
    /// Object holding the leaf field.
    pub leaf_object: String,
    pub leaf_offset: u64,
    pub kind: ResolvedKind,
}

impl ResolvedField {
    pub fn ctx_end(&self) -> u64 {
        self.ctx_offset + self.size
    }

    pub fn depth(&self) -> usize {
        self.chain.len() + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CopyMode {
    #[default]
    Partial,
    Full,
}

/// Nested-object demand of a reference slot, in offsets of the target object.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NestedDemand {
    All,
    Ranges(BTreeSet<(u64, u64)>),
}

/// Context bytes a program may touch, as computed by the analysis.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ContextDemand {
    /// `(offset, len)` of constant-offset context accesses.
    pub ranges: BTreeSet<(u64, u64)>,
    /// Some context access has a non-constant offset.
    pub variable: bool,
    /// Accesses through pointers loaded from reference slots, keyed by slot offset.
    pub nested: BTreeMap<u64, NestedDemand>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NestedSelection {
    All,
    Fields(BTreeSet<usize>),
}

/// Which mirrored fields (and nested fields) a prepared context carries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    pub mode: CopyMode,
    pub fields: BTreeSet<usize>,
    /// Per reference-slot field index, the target fields to copy.
    pub nested: BTreeMap<usize, NestedSelection>,
}

impl Selection {
    pub fn empty() -> Self {
        Selection { mode: CopyMode::Partial, fields: BTreeSet::new(), nested: BTreeMap::new() }
    }
}

/// A validated [`ContextSpec`] bound to its object descriptors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolvedContext {
    pub name: String,
    pub root: String,
    pub fields: Vec<ResolvedField>,
    descriptors: BTreeMap<String, KernelObjectDescriptor>,
}

impl ResolvedContext {
    pub fn resolve<'a>(
        spec: &ContextSpec,
        descriptors: impl IntoIterator<Item = &'a KernelObjectDescriptor>,
    ) -> Result<Self, ContextError> {
        let descriptors: BTreeMap<String, KernelObjectDescriptor> =
            descriptors.into_iter().map(|d| (d.name.clone(), d.clone())).collect();
        if !descriptors.contains_key(&spec.root) {
            return Err(ContextError::UnresolvedPath(spec.root.clone()));
        }
        let mut fields = Vec::with_capacity(spec.fields.len());
        for m in &spec.fields {
            fields.push(resolve_path(&descriptors, &spec.root, m)?);
        }
        let mut ranges: Vec<(u64, u64, &str)> =
            fields.iter().map(|f| (f.ctx_offset, f.ctx_end(), f.path.as_str())).collect();
        ranges.sort();
        for w in ranges.windows(2) {
            if w[0].1 > w[1].0 {
                return Err(ContextError::InvalidSpec(format!("`{}` and `{}` overlap", w[0].2, w[1].2)));
            }
        }
        Ok(ResolvedContext { name: spec.name.clone(), root: spec.root.clone(), fields, descriptors })
    }

    pub fn descriptor(&self, name: &str) -> Option<&KernelObjectDescriptor> {
        self.descriptors.get(name)
    }

    /// The mirrored field occupying exactly `[off, off+len)`.
    pub fn field_exact(&self, off: u64, len: u64) -> Option<(usize, &ResolvedField)> {
        self.fields.iter().enumerate().find(|(_, f)| f.ctx_offset == off && f.size == len)
    }

    pub fn fields_overlapping(&self, off: u64, len: u64) -> impl Iterator<Item = usize> + '_ {
        self.fields
            .iter()
            .enumerate()
            .filter(move |(_, f)| f.ctx_offset < off + len && off < f.ctx_end())
            .map(|(i, _)| i)
    }

    /// The reference slot at context offset `off`, with its target descriptor.
    pub fn ref_slot(&self, off: u64) -> Option<(usize, &KernelObjectDescriptor)> {
        self.fields.iter().enumerate().find_map(|(i, f)| match &f.kind {
            ResolvedKind::RefSlot { target } if f.ctx_offset == off => Some((i, &self.descriptors[target])),
            _ => None,
        })
    }

    /// Bytes of the fully mirrored context.
    pub fn full_size(&self) -> u64 {
        self.fields.iter().map(|f| f.ctx_end()).max().unwrap_or(0)
    }

    pub fn select(&self, demand: &ContextDemand, requested: CopyMode) -> Selection {
        if requested == CopyMode::Full || demand.variable {
            return Selection {
                mode: CopyMode::Full,
                fields: (0..self.fields.len()).collect(),
                nested: self
                    .fields
                    .iter()
                    .enumerate()
                    .filter(|(_, f)| matches!(f.kind, ResolvedKind::RefSlot { .. }))
                    .map(|(i, _)| (i, NestedSelection::All))
                    .collect(),
            };
        }
        let mut sel = Selection::empty();
        for (off, len) in &demand.ranges {
            sel.fields.extend(self.fields_overlapping(*off, *len));
        }
        for (slot, nd) in &demand.nested {
            let Some((idx, target)) = self.ref_slot(*slot) else { continue };
            sel.fields.insert(idx);
            let ns = match nd {
                NestedDemand::All => NestedSelection::All,
                NestedDemand::Ranges(r) => {
                    NestedSelection::Fields(r.iter().flat_map(|(o, l)| target.scalars_overlapping(*o, *l)).collect())
                }
            };
            sel.nested.insert(idx, ns);
        }
        for &i in &sel.fields {
            if matches!(self.fields[i].kind, ResolvedKind::RefSlot { .. }) {
                sel.nested.entry(i).or_insert_with(|| NestedSelection::Fields(BTreeSet::new()));
            }
        }
        sel
    }

    /// Scalar field indices of `target` selected by `ns`.
    fn nested_fields(&self, target: &str, ns: &NestedSelection) -> Vec<usize> {
        let d = &self.descriptors[target];
        match ns {
            NestedSelection::All => {
                d.fields.iter().enumerate().filter(|(_, f)| f.kind == FieldKind::Scalar).map(|(i, _)| i).collect()
            }
            NestedSelection::Fields(s) => s.iter().copied().collect(),
        }
    }
}

fn resolve_path(
    descriptors: &BTreeMap<String, KernelObjectDescriptor>,
    root: &str,
    m: &MirroredField,
) -> Result<ResolvedField, ContextError> {
    let unresolved = || ContextError::UnresolvedPath(m.kernel_path.clone());
    let segments: Vec<&str> = m.kernel_path.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(unresolved());
    }
    let mut object = descriptors.get(root).ok_or_else(unresolved)?;
    let mut chain = Vec::new();
    for (i, seg) in segments.iter().enumerate() {
        let f = object.field(seg).ok_or_else(unresolved)?;
        let last = i + 1 == segments.len();
        if last {
            let kind = match f.kind {
                FieldKind::Scalar => ResolvedKind::Scalar,
                FieldKind::Ref => ResolvedKind::RefSlot { target: f.target.clone().ok_or_else(unresolved)? },
            };
            if f.size != m.size {
                return Err(ContextError::InvalidSpec(format!(
                    "`{}` is {} bytes in the object but {} in the context",
                    m.kernel_path, f.size, m.size
                )));
            }
            if !m.ctx_offset.is_multiple_of(m.size) {
                return Err(ContextError::InvalidSpec(format!("`{}` is not naturally aligned", m.kernel_path)));
            }
            return Ok(ResolvedField {
                ctx_offset: m.ctx_offset,
                size: m.size,
                access: m.access,
                path: m.kernel_path.clone(),
                chain,
                leaf_object: object.name.clone(),
                leaf_offset: f.offset,
                kind,
            });
        }
        if f.kind != FieldKind::Ref {
            return Err(unresolved());
        }
        chain.push(f.offset);
        object = descriptors.get(f.target.as_deref().unwrap_or_default()).ok_or_else(unresolved)?;
    }
    Err(unresolved())
}

/// Follows `chain` from `root_addr`, returning the address of the object holding the leaf.
fn walk_chain(space: &SimAddressSpace, root_addr: u64, chain: &[u64], path: &str) -> Result<u64, ContextError> {
    let mut addr = root_addr;
    for off in chain {
        addr = strip_tag(space.host_read(addr + off, 8).map_err(|_| ContextError::NullReference(path.into()))?);
        if addr == 0 {
            return Err(ContextError::NullReference(path.into()));
        }
    }
    Ok(addr)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SyncEntry {
    pub path: String,
    /// Untagged sandbox address of the copy.
    pub sandbox_addr: u64,
    pub len: u64,
    pub kernel_addr: u64,
    pub access: FieldAccess,
    pub dirty: bool,
    pub entry_snapshot: Vec<u8>,
}

impl SyncEntry {
    fn intersects(&self, addr: u64, len: u64) -> bool {
        addr < self.sandbox_addr + self.len && self.sandbox_addr < addr + len
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ObjectTranslation {
    pub object: String,
    pub sandbox_addr: u64,
    pub kernel_addr: u64,
    pub size: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct SyncReport {
    pub written: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SyncTable {
    /// Pointer handed to the guest in r1 (tagged in MTE modes).
    pub ctx_base: u64,
    pub ctx_size: u64,
    pub mode: CopyMode,
    pub entries: Vec<SyncEntry>,
    pub translations: Vec<ObjectTranslation>,
    /// Mirrored context fields copied, reference slots included.
    pub ctx_fields_copied: usize,
    /// Fields copied into heap copies of referenced objects.
    pub nested_fields_copied: usize,
    pub bytes_copied: u64,
}

impl SyncTable {
    /// Total fields transferred into the sandbox at preparation.
    pub fn fields_copied(&self) -> usize {
        self.ctx_fields_copied + self.nested_fields_copied
    }

    /// Flags every entry intersecting a guest store to `[addr, addr+len)`.
    pub fn mark_store(&mut self, addr: u64, len: u64) {
        let a = strip_tag(addr);
        for e in self.entries.iter_mut().filter(|e| e.intersects(a, len)) {
            e.dirty = true;
        }
    }

    pub fn dirty_count(&self) -> usize {
        self.entries.iter().filter(|e| e.dirty).count()
    }

    /// Index of the translation registered for `sandbox_addr` (tag ignored).
    pub fn translate(&self, sandbox_addr: u64) -> Result<(usize, u64), ContextError> {
        let a = strip_tag(sandbox_addr);
        self.translations
            .iter()
            .position(|t| t.sandbox_addr == a)
            .map(|i| (i, self.translations[i].kernel_addr))
            .ok_or(ContextError::UnknownObject(sandbox_addr))
    }

    fn entries_of(&self, translation: usize) -> impl Iterator<Item = usize> + '_ {
        let t = &self.translations[translation];
        self.entries
            .iter()
            .enumerate()
            .filter(move |(_, e)| e.kernel_addr >= t.kernel_addr && e.kernel_addr < t.kernel_addr + t.size)
            .map(|(i, _)| i)
    }

    fn write_back(&mut self, space: &mut SimAddressSpace, idx: usize, report: &mut SyncReport) {
        let e = &mut self.entries[idx];
        if !e.dirty {
            return;
        }
        if !e.access.writable() {
            report.skipped += 1;
            return;
        }
        let bytes = space.read_bytes(e.sandbox_addr, e.len).expect("entry inside sandbox").to_vec();
        space.write_bytes(e.kernel_addr, &bytes).expect("entry inside kernel object");
        e.dirty = false;
        report.written += 1;
    }

    /// Writes dirty writable entries of one object back before a helper runs.
    pub fn flush_object(&mut self, space: &mut SimAddressSpace, translation: usize) -> SyncReport {
        let mut report = SyncReport::default();
        let idx: Vec<usize> = self.entries_of(translation).collect();
        for i in idx {
            self.write_back(space, i, &mut report);
        }
        report
    }

    /// Re-copies every mirrored field of one object after a helper returns. Returns the
    /// number of fields transferred.
    pub fn refresh_object(&mut self, space: &mut SimAddressSpace, translation: usize) -> usize {
        let idx: Vec<usize> = self.entries_of(translation).collect();
        for &i in &idx {
            let e = &self.entries[i];
            let bytes = space.read_bytes(e.kernel_addr, e.len).expect("entry inside kernel object").to_vec();
            space.write_bytes(e.sandbox_addr, &bytes).expect("entry inside sandbox");
        }
        idx.len()
    }

    /// Number of bytes in the entries of a translation.
    pub fn object_entry_bytes(&self, translation: usize) -> u64 {
        self.entries_of(translation).map(|i| self.entries[i].len).sum()
    }
}

/// Final write-back: copies exactly the dirty entries whose access mode allows writing.
pub fn sync_out(space: &mut SimAddressSpace, table: &mut SyncTable) -> SyncReport {
    let mut report = SyncReport::default();
    for i in 0..table.entries.len() {
        table.write_back(space, i, &mut report);
    }
    report
}

/// Runs `body` with the kernel address behind a sandboxed object pointer, flushing the
/// object's dirty fields before and refreshing all its mirrored fields after.
pub fn translate_for_helper<R>(
    table: &mut SyncTable,
    space: &mut SimAddressSpace,
    sandbox_addr: u64,
    body: impl FnOnce(&mut SimAddressSpace, u64) -> R,
) -> Result<(R, SyncReport, usize), ContextError> {
    let (idx, kernel) = table.translate(sandbox_addr)?;
    let flushed = table.flush_object(space, idx);
    let out = body(space, kernel);
    let refreshed = table.refresh_object(space, idx);
    Ok((out, flushed, refreshed))
}

fn copy_entry(
    space: &mut SimAddressSpace,
    table: &mut SyncTable,
    path: String,
    sandbox_addr: u64,
    kernel_addr: u64,
    len: u64,
    access: FieldAccess,
) {
    let bytes = space.read_bytes(kernel_addr, len).expect("kernel field inside arena").to_vec();
    space.write_bytes(sandbox_addr, &bytes).expect("sandbox field inside arena");
    table.bytes_copied += len;
    table.entries.push(SyncEntry { path, sandbox_addr, len, kernel_addr, access, dirty: false, entry_snapshot: bytes });
}

/// Copies the selected fields of the object at `root_addr` into the sandbox.
pub fn prepare_context(
    space: &mut SimAddressSpace,
    sb: &Sandbox,
    ctx: &ResolvedContext,
    root_addr: u64,
    selection: &Selection,
) -> Result<SyncTable, ContextError> {
    let size = selection.fields.iter().map(|&i| ctx.fields[i].ctx_end()).max().unwrap_or(0).next_multiple_of(8);
    let base = sb.reserve_context(space, size)?;
    let root_size = ctx.descriptor(&ctx.root).map_or(0, |d| d.size);
    let mut table = SyncTable {
        ctx_base: sb.pointer(base),
        ctx_size: size,
        mode: selection.mode,
        entries: Vec::new(),
        translations: vec![ObjectTranslation {
            object: ctx.root.clone(),
            sandbox_addr: base,
            kernel_addr: root_addr,
            size: root_size,
        }],
        ctx_fields_copied: 0,
        nested_fields_copied: 0,
        bytes_copied: 0,
    };
    for &i in &selection.fields {
        let f = &ctx.fields[i];
        let holder = walk_chain(space, root_addr, &f.chain, &f.path)?;
        table.ctx_fields_copied += 1;
        match &f.kind {
            ResolvedKind::Scalar => {
                copy_entry(
                    space,
                    &mut table,
                    f.path.clone(),
                    base + f.ctx_offset,
                    holder + f.leaf_offset,
                    f.size,
                    f.access,
                );
            }
            ResolvedKind::RefSlot { target } => {
                let kernel_obj = strip_tag(space.host_read(holder + f.leaf_offset, 8).expect("reference inside arena"));
                if kernel_obj == 0 {
                    return Err(ContextError::NullReference(f.path.clone()));
                }
                let d = ctx.descriptor(target).expect("resolved target");
                let copy = sb.heap_alloc(space, d.size)?;
                space.host_write(base + f.ctx_offset, 8, sb.pointer(copy)).expect("slot inside sandbox");
                table.bytes_copied += 8;
                table.translations.push(ObjectTranslation {
                    object: target.clone(),
                    sandbox_addr: copy,
                    kernel_addr: kernel_obj,
                    size: d.size,
                });
                let ns = selection.nested.get(&i).cloned().unwrap_or(NestedSelection::Fields(BTreeSet::new()));
                for fi in ctx.nested_fields(target, &ns) {
                    let nf = &d.fields[fi];
                    table.nested_fields_copied += 1;
                    copy_entry(
                        space,
                        &mut table,
                        format!("{}.{}", f.path, nf.name),
                        copy + nf.offset,
                        kernel_obj + nf.offset,
                        nf.size,
                        f.access,
                    );
                }
            }
        }
    }
    sb.set_sync_ref(space, base);
    Ok(table)
}

/// Tags handed out to cores for direct object tagging: 0x1..=0xD, then 0x0. 0xE (kernel
/// memory) and 0xF (match-all) are never used.
pub const TAG_POOL: [u8; 14] = [0x1, 0x2, 0x3, 0x4, 0x5, 0x6, 0x7, 0x8, 0x9, 0xA, 0xB, 0xC, 0xD, 0x0];

#[derive(Debug, Clone, Default)]
pub struct TagPool {
    in_use: BTreeMap<u32, u8>,
    reuse_cursor: usize,
}

impl TagPool {
    pub fn new() -> Self {
        Self::default()
    }

    /// Assigns the first free pool tag to `core`. When every tag is held by another core a
    /// held tag is shared, chosen round-robin, and the flag is set.
    pub fn allocate(&mut self, core: u32) -> (u8, bool) {
        if let Some(t) = self.in_use.get(&core) {
            return (*t, false);
        }
        let held: BTreeSet<u8> = self.in_use.values().copied().collect();
        let (tag, weakened) = match TAG_POOL.iter().find(|t| !held.contains(t)) {
            Some(t) => (*t, false),
            None => {
                let t = TAG_POOL[self.reuse_cursor % TAG_POOL.len()];
                self.reuse_cursor += 1;
                (t, true)
            }
        };
        self.in_use.insert(core, tag);
        (tag, weakened)
    }

    pub fn release(&mut self, core: u32) {
        self.in_use.remove(&core);
    }

    pub fn held(&self) -> usize {
        self.in_use.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct TaggingReceipt {
    pub tag: u8,
    pub granules_tagged: usize,
    /// Bytes inside tagged granules that belong to no accessed field.
    pub overtagged_bytes: u64,
    /// Prior tag of every granule touched.
    pub saved_tags: Vec<(u64, u8)>,
    /// Prior value of every reference field rewritten to carry the tag.
    pub saved_refs: Vec<(u64, u64)>,
    pub weakened: bool,
}

impl TaggingReceipt {
    /// Restores every saved reference value and granule tag.
    pub fn restore(&self, space: &mut SimAddressSpace) {
        for (addr, v) in self.saved_refs.iter().rev() {
            space.host_write(*addr, 8, *v).expect("reference inside arena");
        }
        for (g, t) in &self.saved_tags {
            space.set_tag_range(*g, GRANULE, *t).expect("granule inside arena");
        }
    }
}

/// Accumulates field ranges and tags the covering granules once.
#[derive(Debug, Default)]
struct GranuleTagger {
    ranges: BTreeMap<u64, Vec<(u64, u64)>>,
}

impl GranuleTagger {
    fn add(&mut self, addr: u64, len: u64) {
        let mut g = addr - addr % GRANULE;
        while g < addr + len {
            let s = addr.max(g);
            let e = (addr + len).min(g + GRANULE);
            self.ranges.entry(g).or_default().push((s, e));
            g += GRANULE;
        }
    }

    fn apply(self, space: &mut SimAddressSpace, receipt: &mut TaggingReceipt) -> Result<(), ContextError> {
        for &g in self.ranges.keys() {
            if space.get_tag(g) != Some(space.default_mem_tag()) {
                return Err(ContextError::TagOverlap(g));
            }
        }
        for (g, mut parts) in self.ranges {
            parts.sort();
            let mut covered = 0;
            let mut cursor = g;
            for (s, e) in parts {
                let s = s.max(cursor);
                if e > s {
                    covered += e - s;
                    cursor = e;
                }
            }
            receipt.saved_tags.push((g, space.get_tag(g).expect("granule inside arena")));
            space.set_tag_range(g, GRANULE, receipt.tag)?;
            receipt.granules_tagged += 1;
            receipt.overtagged_bytes += GRANULE - covered;
        }
        Ok(())
    }
}

/// Tags the granules covering `fields` (`(offset, len)` in the object at `obj_addr`).
pub fn mte_min_tag_object(
    space: &mut SimAddressSpace,
    obj_addr: u64,
    fields: &[(u64, u64)],
    tag: u8,
    weakened: bool,
) -> Result<TaggingReceipt, ContextError> {
    let mut receipt = TaggingReceipt { tag, weakened, ..Default::default() };
    let mut tagger = GranuleTagger::default();
    for (off, len) in fields {
        tagger.add(obj_addr + off, *len);
    }
    tagger.apply(space, &mut receipt)?;
    Ok(receipt)
}

/// Direct tagging for a whole selected context: accessed leaf fields, every reference field
/// on the way to them (rewritten in place to carry `tag`) and the selected fields of objects
/// behind reference slots.
pub fn mte_min_tag(
    space: &mut SimAddressSpace,
    ctx: &ResolvedContext,
    root_addr: u64,
    selection: &Selection,
    tag: u8,
    weakened: bool,
) -> Result<TaggingReceipt, ContextError> {
    let mut receipt = TaggingReceipt { tag, weakened, ..Default::default() };
    let mut tagger = GranuleTagger::default();
    let mut refs: BTreeSet<u64> = BTreeSet::new();
    for &i in &selection.fields {
        let f = &ctx.fields[i];
        let mut addr = root_addr;
        for off in &f.chain {
            tagger.add(addr + off, 8);
            refs.insert(addr + off);
            addr = strip_tag(space.host_read(addr + off, 8).map_err(|_| ContextError::NullReference(f.path.clone()))?);
            if addr == 0 {
                return Err(ContextError::NullReference(f.path.clone()));
            }
        }
        tagger.add(addr + f.leaf_offset, f.size);
        if let ResolvedKind::RefSlot { target } = &f.kind {
            refs.insert(addr + f.leaf_offset);
            let obj = strip_tag(space.host_read(addr + f.leaf_offset, 8).expect("reference inside arena"));
            if obj == 0 {
                return Err(ContextError::NullReference(f.path.clone()));
            }
            let d = ctx.descriptor(target).expect("resolved target");
            match selection.nested.get(&i) {
                Some(NestedSelection::All) => tagger.add(obj, d.size),
                Some(ns) => {
                    for fi in ctx.nested_fields(target, ns) {
                        tagger.add(obj + d.fields[fi].offset, d.fields[fi].size);
                    }
                }
                None => {}
            }
        }
    }
    tagger.apply(space, &mut receipt)?;
    for r in refs {
        let v = space.host_read(r, 8).expect("reference inside arena");
        receipt.saved_refs.push((r, v));
        space.host_write(r, 8, with_tag(v, tag)).expect("reference inside arena");
    }
    Ok(receipt)
}
