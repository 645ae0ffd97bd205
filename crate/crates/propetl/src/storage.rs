//! Bit-level storage accounting and the checkpoint container.
//!
//! Storage cost is counted exactly: groups of parameters, each a count times
//! a bit width, summed in integer arithmetic. The checkpoint keeps the
//! shared prototype at 32 bits per weight and every mask at 1 bit per
//! position; mask scores are discarded at save time, so a checkpoint can
//! reconstruct sub-networks but never re-train masks.

use crate::error::{Error, Result};
use crate::masking::{BinaryMask, CombineMode, Sparsity};
use crate::petl::{
    AdapterPrototype, AttachMode, LoraPrototype, Nonlinearity, PrefixPrototype, ProPetlAttachment,
    Prototype, Variant,
};
use crate::autodiff::Tensor;
use std::fmt;
use std::path::Path;

// ---------------------------------------------------------------------------
// Bit-level storage arithmetic
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct BlsGroup {
    pub name: String,
    /// Parameter count rho.
    pub count: u64,
    /// Bit width b.
    pub width: u32,
}

impl BlsGroup {
    pub fn bits(&self) -> Result<u64> {
        self.count
            .checked_mul(self.width as u64)
            .ok_or_else(|| Error::invalid("bls", "group bit count overflows u64"))
    }
}

#[derive(Debug, Clone)]
pub struct BlsReport {
    pub groups: Vec<BlsGroup>,
    pub total_bits: u64,
    /// A reference cost (e.g. per-layer modules without sharing).
    pub baseline_bits: Option<u64>,
    /// total / baseline.
    pub ratio: Option<f64>,
}

impl BlsReport {
    pub fn from_groups(groups: Vec<BlsGroup>, baseline_bits: Option<u64>) -> Result<Self> {
        let mut total: u64 = 0;
        for grp in &groups {
            if grp.width == 0 {
                return Err(Error::invalid("bls", format!("group {:?} has width 0", grp.name)));
            }
            total = total
                .checked_add(grp.bits()?)
                .ok_or_else(|| Error::invalid("bls", "total bit count overflows u64"))?;
        }
        let ratio = baseline_bits
            .filter(|&b| b > 0)
            .map(|b| total as f64 / b as f64);
        Ok(BlsReport { groups, total_bits: total, baseline_bits, ratio })
    }
}

impl fmt::Display for BlsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for g in &self.groups {
            writeln!(
                f,
                "{:<24} rho={:<12} b={:<3} bits={}",
                g.name,
                g.count,
                g.width,
                g.count * g.width as u64
            )?;
        }
        write!(f, "total_bits={}", self.total_bits)?;
        if let Some(b) = self.baseline_bits {
            write!(f, " baseline_bits={b}")?;
        }
        if let Some(r) = self.ratio {
            write!(f, " ratio={r:.5}")?;
        }
        Ok(())
    }
}

/// Total storage in bits for (count, width) groups; exact, overflow-checked.
pub fn bls(groups: &[(u64, u32)]) -> Result<u64> {
    let named: Vec<BlsGroup> = groups
        .iter()
        .enumerate()
        .map(|(i, &(count, width))| BlsGroup { name: format!("group{i}"), count, width })
        .collect();
    Ok(BlsReport::from_groups(named, None)?.total_bits)
}

fn check_dims(op: &'static str, d: usize, size: usize, layers: usize) -> Result<()> {
    if d == 0 || size == 0 || layers == 0 {
        return Err(Error::invalid(op, "dimensions must be positive"));
    }
    Ok(())
}

/// Parameters in one stored module copy: adapter 2*bn*d + bn + d, LoRA
/// 4*bn*d, prefix 2*l*d.
pub fn per_layer_params(variant: Variant, d: usize, size: usize) -> u64 {
    let (d, s) = (d as u64, size as u64);
    match variant {
        Variant::Adapter => 2 * s * d + s + d,
        Variant::Lora => 4 * s * d,
        Variant::Prefix => 2 * s * d,
    }
}

/// Mask positions per layer; biases are never masked.
pub fn maskable_params(variant: Variant, d: usize, size: usize) -> u64 {
    let (d, s) = (d as u64, size as u64);
    match variant {
        Variant::Adapter => 2 * s * d,
        Variant::Lora => 4 * s * d,
        Variant::Prefix => 2 * s * d,
    }
}

/// Per-layer independent modules at 32 bits each: 32 * n * L.
pub fn bls_vanilla(variant: Variant, d: usize, size: usize, layers: usize) -> Result<u64> {
    check_dims("bls_vanilla", d, size, layers)?;
    bls(&[(per_layer_params(variant, d, size) * layers as u64, 32)])
}

/// One shared 32-bit prototype plus a 1-bit mask per layer over the maskable
/// positions: 32 * n + maskable * L.
pub fn bls_propetl(variant: Variant, d: usize, size: usize, layers: usize) -> Result<u64> {
    check_dims("bls_propetl", d, size, layers)?;
    bls(&[
        (per_layer_params(variant, d, size), 32),
        (maskable_params(variant, d, size) * layers as u64, 1),
    ])
}

/// Independent masked modules: each layer stores only its retained weights
/// at 32 bits (pruned positions are not counted, biases always survive):
/// adapter 32 * (kept(2*bn*d) + bn + d) * L, with the kept count taken per
/// masked matrix exactly as the thresholding realizes it.
///
/// `literal_prefix` reproduces the published closed form for the prefix
/// variant, which omits the 32-bit width on the retained rows; false gives
/// the width-consistent cost.
pub fn bls_only_mask(
    variant: Variant,
    d: usize,
    size: usize,
    layers: usize,
    k: Sparsity,
    literal_prefix: bool,
) -> Result<u64> {
    check_dims("bls_only_mask", d, size, layers)?;
    let sd = size * d;
    let retained: u64 = match variant {
        Variant::Adapter => 2 * k.ones_count(sd) as u64 + size as u64 + d as u64,
        Variant::Lora => 4 * k.ones_count(sd) as u64,
        Variant::Prefix => 2 * k.ones_count(sd) as u64,
    };
    let width = if literal_prefix && variant == Variant::Prefix { 1 } else { 32 };
    bls(&[(retained * layers as u64, width)])
}

/// Multi-task total from a single module's bit cost p: the prototype plus
/// one 1-bit mask set per layer and per task, p + (p/32) * (L + T).
pub fn bls_multitask(p_bits: u64, layers: u64, tasks: u64) -> Result<u64> {
    if p_bits % 32 != 0 {
        return Err(Error::invalid(
            "bls_multitask",
            format!("module bits {p_bits} not a multiple of 32"),
        ));
    }
    let masks = (p_bits / 32)
        .checked_mul(layers + tasks)
        .ok_or_else(|| Error::invalid("bls_multitask", "mask bits overflow u64"))?;
    p_bits
        .checked_add(masks)
        .ok_or_else(|| Error::invalid("bls_multitask", "total bits overflow u64"))
}

/// Grouped report for the shared-prototype configuration, with the vanilla
/// per-layer cost as baseline. `full_params` (a backbone's parameter count)
/// adds a fraction-of-full-model line via the ratio against 32-bit storage.
pub fn propetl_report(
    variant: Variant,
    d: usize,
    size: usize,
    layers: usize,
    tasks: usize,
    full_params: Option<u64>,
) -> Result<BlsReport> {
    check_dims("bls_propetl", d, size, layers)?;
    let n = per_layer_params(variant, d, size);
    let mask_sets = (layers + tasks) as u64;
    let groups = vec![
        BlsGroup { name: format!("prototype({variant})"), count: n, width: 32 },
        BlsGroup {
            name: format!("masks(x{mask_sets})"),
            count: maskable_params(variant, d, size) * mask_sets,
            width: 1,
        },
    ];
    let baseline = match full_params {
        Some(p) => p
            .checked_mul(32)
            .ok_or_else(|| Error::invalid("bls", "full-model bits overflow u64")),
        None => bls_vanilla(variant, d, size, layers),
    }?;
    BlsReport::from_groups(groups, Some(baseline))
}

// ---------------------------------------------------------------------------
// Checkpoint container
// ---------------------------------------------------------------------------
//
// Layout, all integers little-endian:
//   magic "PPTL" | version u16 | variant u8 | combine u8 | mode u8 |
//   nonlin u8 | d u32 | size u32 | layers u32 | tasks u32 | k_num u32 |
//   k_den u32 | alpha f32 | reserved u16          (40-byte header)
//   section_count u32
//   per section: name_len u16 | name | kind u8 (0 tensor / 1 mask) |
//   ndim u8 | dims u32 x ndim | payload_len u64 | crc32(payload) u32 |
//   payload (tensors: f32 row-major; masks: LSB-first packed bits)

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PPTL";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SectionKind {
    Tensor,
    Mask,
}

#[derive(Debug, Clone)]
struct RawSection {
    name: String,
    kind: SectionKind,
    shape: Vec<usize>,
    payload: Vec<u8>,
    crc: u32,
}

#[derive(Debug, Clone)]
struct Header {
    variant: Variant,
    combine: CombineMode,
    mode: AttachMode,
    nonlin: Nonlinearity,
    d: u32,
    size: u32,
    layers: u32,
    tasks: u32,
    k: Sparsity,
    alpha: f32,
}

fn variant_byte(v: Variant) -> u8 {
    match v {
        Variant::Adapter => 0,
        Variant::Lora => 1,
        Variant::Prefix => 2,
    }
}

fn combine_byte(c: CombineMode) -> u8 {
    match c {
        CombineMode::Or => 0,
        CombineMode::And => 1,
        CombineMode::Add => 2,
    }
}

fn mode_byte(m: AttachMode) -> u8 {
    match m {
        AttachMode::Propetl => 0,
        AttachMode::OnlyShare => 1,
        AttachMode::OnlyMask => 2,
        AttachMode::RandomMask => 3,
    }
}

fn nonlin_byte(n: Nonlinearity) -> u8 {
    match n {
        Nonlinearity::Relu => 0,
        Nonlinearity::Gelu => 1,
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::corrupt(format!(
                "truncated while reading {what} at byte {} (need {n} more, have {})",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

fn write_header(out: &mut Vec<u8>, h: &Header) {
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(variant_byte(h.variant));
    out.push(combine_byte(h.combine));
    out.push(mode_byte(h.mode));
    out.push(nonlin_byte(h.nonlin));
    out.extend_from_slice(&h.d.to_le_bytes());
    out.extend_from_slice(&h.size.to_le_bytes());
    out.extend_from_slice(&h.layers.to_le_bytes());
    out.extend_from_slice(&h.tasks.to_le_bytes());
    out.extend_from_slice(&h.k.num().to_le_bytes());
    out.extend_from_slice(&h.k.den().to_le_bytes());
    out.extend_from_slice(&h.alpha.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes()); // reserved
}

fn read_header(r: &mut Reader) -> Result<Header> {
    let magic = r.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::corrupt(format!("bad magic {magic:02x?}, want \"PPTL\"")));
    }
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::corrupt(format!(
            "unsupported version {version}, this build reads {CHECKPOINT_VERSION}"
        )));
    }
    let variant = match r.u8("variant")? {
        0 => Variant::Adapter,
        1 => Variant::Lora,
        2 => Variant::Prefix,
        b => return Err(Error::corrupt(format!("unknown variant byte {b}"))),
    };
    let combine = match r.u8("combine")? {
        0 => CombineMode::Or,
        1 => CombineMode::And,
        2 => CombineMode::Add,
        b => return Err(Error::corrupt(format!("unknown combine byte {b}"))),
    };
    let mode = match r.u8("mode")? {
        0 => AttachMode::Propetl,
        1 => AttachMode::OnlyShare,
        2 => AttachMode::OnlyMask,
        3 => AttachMode::RandomMask,
        b => return Err(Error::corrupt(format!("unknown mode byte {b}"))),
    };
    let nonlin = match r.u8("nonlin")? {
        0 => Nonlinearity::Relu,
        1 => Nonlinearity::Gelu,
        b => return Err(Error::corrupt(format!("unknown nonlinearity byte {b}"))),
    };
    let d = r.u32("d")?;
    let size = r.u32("size")?;
    let layers = r.u32("layers")?;
    let tasks = r.u32("tasks")?;
    let k_num = r.u32("k numerator")?;
    let k_den = r.u32("k denominator")?;
    let k = Sparsity::ratio(k_num as u64, k_den as u64)
        .map_err(|e| Error::corrupt(format!("header k: {e}")))?;
    let alpha = r.f32("alpha")?;
    let reserved = r.u16("reserved")?;
    if reserved != 0 {
        return Err(Error::corrupt(format!("reserved field is {reserved}, want 0")));
    }
    if d == 0 || size == 0 || layers == 0 {
        return Err(Error::corrupt("header has zero dimension"));
    }
    Ok(Header { variant, combine, mode, nonlin, d, size, layers, tasks, k, alpha })
}

fn push_section(out: &mut Vec<u8>, name: &str, kind: SectionKind, shape: &[usize], payload: &[u8]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(match kind {
        SectionKind::Tensor => 0,
        SectionKind::Mask => 1,
    });
    out.push(shape.len() as u8);
    for &dim in shape {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(payload).to_le_bytes());
    out.extend_from_slice(payload);
}

fn tensor_payload(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.numel() * 4);
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn read_section(r: &mut Reader) -> Result<RawSection> {
    let name_len = r.u16("section name length")? as usize;
    let name = String::from_utf8(r.take(name_len, "section name")?.to_vec())
        .map_err(|_| Error::corrupt("section name is not UTF-8"))?;
    let kind = match r.u8(&format!("section {name}: kind"))? {
        0 => SectionKind::Tensor,
        1 => SectionKind::Mask,
        b => return Err(Error::corrupt(format!("section {name}: unknown kind byte {b}"))),
    };
    let ndim = r.u8(&format!("section {name}: ndim"))? as usize;
    if ndim == 0 || ndim > 4 {
        return Err(Error::corrupt(format!("section {name}: ndim {ndim} outside 1..=4")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for i in 0..ndim {
        shape.push(r.u32(&format!("section {name}: dim {i}"))? as usize);
    }
    let numel = shape.iter().try_fold(1usize, |a, &b| a.checked_mul(b)).ok_or_else(|| {
        Error::corrupt(format!("section {name}: shape {shape:?} overflows"))
    })?;
    let payload_len = r.u64(&format!("section {name}: payload length"))? as usize;
    let want = match kind {
        SectionKind::Tensor => numel * 4,
        SectionKind::Mask => numel.div_ceil(8),
    };
    if payload_len != want {
        return Err(Error::corrupt(format!(
            "section {name}: payload {payload_len} bytes does not match shape {shape:?} ({want} expected)"
        )));
    }
    let crc = r.u32(&format!("section {name}: crc"))?;
    let payload = r.take(payload_len, &format!("section {name}: payload"))?.to_vec();
    if crc32fast::hash(&payload) != crc {
        return Err(Error::corrupt(format!("section {name}: crc mismatch")));
    }
    Ok(RawSection { name, kind, shape, payload, crc })
}

fn section_tensor(s: &RawSection) -> Result<Tensor> {
    if s.kind != SectionKind::Tensor {
        return Err(Error::corrupt(format!("section {}: expected a tensor", s.name)));
    }
    let data: Vec<f32> = s
        .payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::corrupt(format!("section {}: non-finite weight", s.name)));
    }
    Tensor::new(s.shape.clone(), data)
        .map_err(|e| Error::corrupt(format!("section {}: {e}", s.name)))
}

fn section_mask(s: &RawSection, k: Sparsity) -> Result<BinaryMask> {
    if s.kind != SectionKind::Mask {
        return Err(Error::corrupt(format!("section {}: expected a mask", s.name)));
    }
    let mask = BinaryMask::unpack(s.name.clone(), s.shape.clone(), &s.payload)
        .map_err(|e| Error::corrupt(format!("section {}: {e}", s.name)))?;
    let want = k.ones_count(mask.numel());
    if mask.popcount() != want {
        return Err(Error::corrupt(format!(
            "section {}: popcount {} does not match k={} over {} positions (want {})",
            s.name,
            mask.popcount(),
            k,
            mask.numel(),
            want
        )));
    }
    Ok(mask)
}

/// The masks a checkpoint stores for one attachment, in file order.
fn collect_masks(
    att: &ProPetlAttachment,
) -> Result<(Vec<Vec<BinaryMask>>, Vec<Vec<BinaryMask>>)> {
    match att.mode {
        AttachMode::OnlyShare => Ok((Vec::new(), Vec::new())),
        AttachMode::RandomMask => match &att.frozen_layer_masks {
            Some(frozen) => Ok((frozen.clone(), Vec::new())),
            None => Err(Error::invalid(
                "save_checkpoint",
                "random-mask attachment has no frozen masks; refresh before saving",
            )),
        },
        AttachMode::Propetl | AttachMode::OnlyMask => {
            let layer: Vec<Vec<BinaryMask>> = (0..att.num_layers)
                .map(|l| att.layer_masks(l))
                .collect::<Result<_>>()?;
            let task: Vec<Vec<BinaryMask>> =
                (0..att.num_tasks()).map(|t| att.task_masks(t)).collect::<Result<_>>()?;
            Ok((layer, task))
        }
    }
}

pub fn save_checkpoint(att: &ProPetlAttachment, path: &Path) -> Result<()> {
    let proto = att.prototype();
    let (nonlin, alpha) = match proto {
        Prototype::Adapter(a) => (a.nonlin, 0.0f32),
        Prototype::Lora(l) => (Nonlinearity::Relu, l.alpha),
        Prototype::Prefix(_) => (Nonlinearity::Relu, 0.0f32),
    };
    let header = Header {
        variant: att.variant,
        combine: att.combine,
        mode: att.mode,
        nonlin,
        d: proto.d() as u32,
        size: proto.size() as u32,
        layers: att.num_layers as u32,
        tasks: att.num_tasks() as u32,
        k: att.k,
        alpha,
    };
    let (layer_masks, task_masks) = collect_masks(att)?;

    let mut body = Vec::new();
    let mut count: u32 = 0;
    for (pi, proto) in att.prototypes.iter().enumerate() {
        match proto {
            Prototype::Adapter(a) => {
                for (name, t) in [
                    ("w_down", &a.w_down),
                    ("b_down", &a.b_down),
                    ("w_up", &a.w_up),
                    ("b_up", &a.b_up),
                ] {
                    push_section(
                        &mut body,
                        &format!("proto{pi}.{name}"),
                        SectionKind::Tensor,
                        t.shape(),
                        &tensor_payload(t),
                    );
                    count += 1;
                }
            }
            Prototype::Lora(l) => {
                for (name, t) in [
                    ("q_down", &l.q_down),
                    ("q_up", &l.q_up),
                    ("v_down", &l.v_down),
                    ("v_up", &l.v_up),
                ] {
                    push_section(
                        &mut body,
                        &format!("proto{pi}.{name}"),
                        SectionKind::Tensor,
                        t.shape(),
                        &tensor_payload(t),
                    );
                    count += 1;
                }
            }
            Prototype::Prefix(p) => {
                // Store the materialized prefix; the reparameterization is a
                // training-time device and costs nothing at rest.
                let mat = p.derive_p();
                push_section(
                    &mut body,
                    &format!("proto{pi}.p"),
                    SectionKind::Tensor,
                    mat.shape(),
                    &tensor_payload(&mat),
                );
                count += 1;
            }
        }
    }
    let slot_names: Vec<&'static str> =
        att.prototype().mask_shapes().iter().map(|(n, _)| *n).collect();
    for (l, slots) in layer_masks.iter().enumerate() {
        for (slot, mask) in slots.iter().enumerate() {
            push_section(
                &mut body,
                &format!("mask.layer{l}.{}", slot_names[slot]),
                SectionKind::Mask,
                mask.shape(),
                &mask.pack(),
            );
            count += 1;
        }
    }
    for (t, slots) in task_masks.iter().enumerate() {
        for (slot, mask) in slots.iter().enumerate() {
            push_section(
                &mut body,
                &format!("mask.task{t}.{}", slot_names[slot]),
                SectionKind::Mask,
                mask.shape(),
                &mask.pack(),
            );
            count += 1;
        }
    }

    let mut out = Vec::with_capacity(44 + body.len());
    write_header(&mut out, &header);
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&body);
    std::fs::write(path, out)?;
    Ok(())
}

fn parse_file(bytes: &[u8]) -> Result<(Header, Vec<RawSection>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let header = read_header(&mut r)?;
    let count = r.u32("section count")? as usize;
    let mut sections = Vec::with_capacity(count);
    for _ in 0..count {
        sections.push(read_section(&mut r)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::corrupt(format!(
            "{} trailing bytes after the last section",
            bytes.len() - r.pos
        )));
    }
    Ok((header, sections))
}

/// Rebuild an inference-ready attachment: load the 32-bit prototype, load
/// the binary masks, and let the caller extract sub-networks by elementwise
/// product. Scores never existed in the file, so the result can be used for
/// inference but not for further mask training.
pub fn load_checkpoint(path: &Path) -> Result<ProPetlAttachment> {
    let bytes = std::fs::read(path)?;
    let (h, sections) = parse_file(&bytes)?;
    let (d, size, layers, tasks) = (h.d as usize, h.size as usize, h.layers as usize, h.tasks as usize);

    let mut by_name: std::collections::BTreeMap<String, RawSection> = std::collections::BTreeMap::new();
    for s in sections {
        if by_name.insert(s.name.clone(), s).is_some() {
            return Err(Error::corrupt("duplicate section name"));
        }
    }
    let mut claim = |name: &str| -> Result<RawSection> {
        by_name
            .remove(name)
            .ok_or_else(|| Error::corrupt(format!("missing section {name}")))
    };

    let proto_count = if h.mode == AttachMode::OnlyMask { layers } else { 1 };
    let mut prototypes = Vec::with_capacity(proto_count);
    for pi in 0..proto_count {
        let proto = match h.variant {
            Variant::Adapter => {
                let w_down = section_tensor(&claim(&format!("proto{pi}.w_down"))?)?;
                let b_down = section_tensor(&claim(&format!("proto{pi}.b_down"))?)?;
                let w_up = section_tensor(&claim(&format!("proto{pi}.w_up"))?)?;
                let b_up = section_tensor(&claim(&format!("proto{pi}.b_up"))?)?;
                for (t, shape) in [
                    (&w_down, vec![d, size]),
                    (&b_down, vec![size]),
                    (&w_up, vec![size, d]),
                    (&b_up, vec![d]),
                ] {
                    if t.shape() != shape.as_slice() {
                        return Err(Error::corrupt(format!(
                            "proto{pi}: tensor shape {:?} does not match header dims {shape:?}",
                            t.shape()
                        )));
                    }
                }
                Prototype::Adapter(AdapterPrototype {
                    w_down,
                    b_down,
                    w_up,
                    b_up,
                    nonlin: h.nonlin,
                    bn: size,
                    d,
                })
            }
            Variant::Lora => {
                if !h.alpha.is_finite() || h.alpha <= 0.0 {
                    return Err(Error::corrupt(format!("header alpha {} invalid", h.alpha)));
                }
                let q_down = section_tensor(&claim(&format!("proto{pi}.q_down"))?)?;
                let q_up = section_tensor(&claim(&format!("proto{pi}.q_up"))?)?;
                let v_down = section_tensor(&claim(&format!("proto{pi}.v_down"))?)?;
                let v_up = section_tensor(&claim(&format!("proto{pi}.v_up"))?)?;
                for (t, shape) in [
                    (&q_down, vec![d, size]),
                    (&q_up, vec![size, d]),
                    (&v_down, vec![d, size]),
                    (&v_up, vec![size, d]),
                ] {
                    if t.shape() != shape.as_slice() {
                        return Err(Error::corrupt(format!(
                            "proto{pi}: tensor shape {:?} does not match header dims {shape:?}",
                            t.shape()
                        )));
                    }
                }
                Prototype::Lora(LoraPrototype {
                    q_down,
                    q_up,
                    v_down,
                    v_up,
                    alpha: h.alpha,
                    bn: size,
                    d,
                })
            }
            Variant::Prefix => {
                let p = section_tensor(&claim(&format!("proto{pi}.p"))?)?;
                Prototype::Prefix(
                    PrefixPrototype::from_materialized(p, size, d)
                        .map_err(|e| Error::corrupt(format!("proto{pi}: {e}")))?,
                )
            }
        };
        prototypes.push(proto);
    }

    let slot_shapes = prototypes[0].mask_shapes();
    let mut load_mask_set = |prefix: &str, count: usize| -> Result<Vec<Vec<BinaryMask>>> {
        (0..count)
            .map(|i| {
                slot_shapes
                    .iter()
                    .map(|(slot, shape)| {
                        let s = claim(&format!("{prefix}{i}.{slot}"))?;
                        let m = section_mask(&s, h.k)?;
                        if m.shape() != shape.as_slice() {
                            return Err(Error::corrupt(format!(
                                "section {}: mask shape {:?} does not match slot shape {shape:?}",
                                s.name,
                                m.shape()
                            )));
                        }
                        Ok(m)
                    })
                    .collect()
            })
            .collect()
    };
    let (frozen_layer, frozen_task) = match h.mode {
        AttachMode::OnlyShare => (None, None),
        _ => {
            let lm = load_mask_set("mask.layer", layers)?;
            let tm = if tasks > 0 { Some(load_mask_set("mask.task", tasks)?) } else { None };
            (Some(lm), tm)
        }
    };

    if let Some(leftover) = by_name.keys().next() {
        return Err(Error::corrupt(format!("unexpected section {leftover}")));
    }

    ProPetlAttachment::from_frozen(
        prototypes,
        h.mode,
        h.k,
        h.combine,
        layers,
        frozen_layer,
        frozen_task,
    )
}

#[derive(Debug, Clone)]
pub struct SectionInfo {
    pub name: String,
    pub kind: SectionKind,
    pub shape: Vec<usize>,
    pub payload_len: u64,
    pub crc: u32,
    /// Fraction of ones, for mask sections.
    pub density: Option<f64>,
    /// L2 norm, for tensor sections.
    pub norm: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct CheckpointSummary {
    pub variant: Variant,
    pub mode: AttachMode,
    pub combine: CombineMode,
    pub nonlin: Nonlinearity,
    pub d: u32,
    pub size: u32,
    pub layers: u32,
    pub tasks: u32,
    pub k: Sparsity,
    pub alpha: f32,
    pub sections: Vec<SectionInfo>,
    /// Logical payload bits: 32 per tensor element, 1 per mask position
    /// (final-byte padding not counted).
    pub payload_bits: u64,
}

impl fmt::Display for CheckpointSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "variant={} mode={} combine={} d={} size={} layers={} tasks={} k={} alpha={}",
            self.variant,
            self.mode,
            self.combine.as_str(),
            self.d,
            self.size,
            self.layers,
            self.tasks,
            self.k,
            self.alpha
        )?;
        for s in &self.sections {
            write!(
                f,
                "{:<28} {:>6} shape={:?} bytes={} crc=0x{:08x}",
                s.name,
                match s.kind {
                    SectionKind::Tensor => "tensor",
                    SectionKind::Mask => "mask",
                },
                s.shape,
                s.payload_len,
                s.crc
            )?;
            if let Some(d) = s.density {
                write!(f, " density={d:.4}")?;
            }
            if let Some(n) = s.norm {
                write!(f, " l2={n:.6}")?;
            }
            writeln!(f)?;
        }
        write!(f, "payload_bits={}", self.payload_bits)
    }
}

/// Validate structure and checksums and report what the file holds, without
/// rebuilding the attachment.
pub fn inspect_checkpoint(path: &Path) -> Result<CheckpointSummary> {
    let bytes = std::fs::read(path)?;
    let (h, sections) = parse_file(&bytes)?;
    let mut payload_bits: u64 = 0;
    let infos = sections
        .iter()
        .map(|s| {
            let numel: u64 = s.shape.iter().map(|&d| d as u64).product();
            let (density, norm) = match s.kind {
                SectionKind::Tensor => {
                    payload_bits += numel * 32;
                    let sq: f64 = s
                        .payload
                        .chunks_exact(4)
                        .map(|c| {
                            let v = f32::from_le_bytes(c.try_into().unwrap()) as f64;
                            v * v
                        })
                        .sum();
                    (None, Some(sq.sqrt()))
                }
                SectionKind::Mask => {
                    payload_bits += numel;
                    let ones: u64 =
                        s.payload.iter().map(|b| b.count_ones() as u64).sum();
                    (Some(ones as f64 / numel.max(1) as f64), None)
                }
            };
            SectionInfo {
                name: s.name.clone(),
                kind: s.kind,
                shape: s.shape.clone(),
                payload_len: s.payload.len() as u64,
                crc: s.crc,
                density,
                norm,
            }
        })
        .collect();
    Ok(CheckpointSummary {
        variant: h.variant,
        mode: h.mode,
        combine: h.combine,
        nonlin: h.nonlin,
        d: h.d,
        size: h.size,
        layers: h.layers,
        tasks: h.tasks,
        k: h.k,
        alpha: h.alpha,
        sections: infos,
        payload_bits,
    })
}
