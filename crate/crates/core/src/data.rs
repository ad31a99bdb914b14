//! Loop ingestion and synthesis: a fixed-column PDB alpha-carbon reader,
//! CDR extraction by residue range, a line-delimited dataset format with
//! deterministic splits, and a synthetic-loop generator that keeps every
//! downstream test self-contained.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{check_validity, distance_matrix, Coordinates, DistanceMatrix, LoopClass, ValiditySpec};

/// The canonical 20-letter amino-acid alphabet, in the column order used by
/// one-hot encodings throughout the crate.
pub const AMINO_ACIDS: [char; 20] = [
    'A', 'C', 'D', 'E', 'F', 'G', 'H', 'I', 'K', 'L', 'M', 'N', 'P', 'Q', 'R', 'S', 'T', 'V',
    'W', 'Y',
];

/// Column index of a one-letter code, if canonical.
pub fn aa_index(c: char) -> Option<usize> {
    AMINO_ACIDS.iter().position(|&a| a == c)
}

/// Standard three-letter to one-letter residue mapping.
pub fn three_to_one(res: &str) -> Option<char> {
    Some(match res {
        "ALA" => 'A',
        "ARG" => 'R',
        "ASN" => 'N',
        "ASP" => 'D',
        "CYS" => 'C',
        "GLN" => 'Q',
        "GLU" => 'E',
        "GLY" => 'G',
        "HIS" => 'H',
        "ILE" => 'I',
        "LEU" => 'L',
        "LYS" => 'K',
        "MET" => 'M',
        "PHE" => 'F',
        "PRO" => 'P',
        "SER" => 'S',
        "THR" => 'T',
        "TRP" => 'W',
        "TYR" => 'Y',
        "VAL" => 'V',
        _ => return None,
    })
}

/// One CDR loop: a sequence over the canonical alphabet plus, when known,
/// alpha-carbon coordinates and/or a distance matrix (generated loops carry
/// a matrix but no coordinates until they are embedded).
#[derive(Debug, Clone, PartialEq)]
pub struct CdrLoop {
    pub id: String,
    pub class: LoopClass,
    /// Alphabet indices, one per residue.
    pub sequence: Vec<usize>,
    pub coords: Option<Coordinates>,
    pub distances: Option<DistanceMatrix>,
}

impl CdrLoop {
    pub fn new(
        id: impl Into<String>,
        class: LoopClass,
        sequence: Vec<usize>,
        coords: Option<Coordinates>,
        distances: Option<DistanceMatrix>,
    ) -> Result<Self> {
        if sequence.is_empty() {
            return Err(Error::Data("empty sequence".into()));
        }
        if let Some(bad) = sequence.iter().find(|&&i| i >= 20) {
            return Err(Error::Data(format!("sequence index {bad} outside the 20-letter alphabet")));
        }
        let n = sequence.len();
        if let Some(c) = &coords {
            if c.len() != n {
                return Err(Error::Data(format!(
                    "sequence length {n} does not match {} coordinate rows",
                    c.len()
                )));
            }
        }
        if let Some(d) = &distances {
            if d.n() != n {
                return Err(Error::Data(format!(
                    "sequence length {n} does not match {}x{} distance matrix",
                    d.n(),
                    d.n()
                )));
            }
        }
        Ok(Self { id: id.into(), class, sequence, coords, distances })
    }

    pub fn from_letters(
        id: impl Into<String>,
        class: LoopClass,
        letters: &str,
        coords: Option<Coordinates>,
    ) -> Result<Self> {
        let sequence = letters
            .chars()
            .map(|c| aa_index(c).ok_or_else(|| Error::Data(format!("unknown residue letter {c:?}"))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(id, class, sequence, coords, None)
    }

    pub fn len(&self) -> usize {
        self.sequence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequence.is_empty()
    }

    pub fn sequence_string(&self) -> String {
        self.sequence.iter().map(|&i| AMINO_ACIDS[i]).collect()
    }

    /// Row-major `N x 20` one-hot encoding.
    pub fn one_hot(&self) -> Vec<f64> {
        let n = self.len();
        let mut out = vec![0.0; n * 20];
        for (row, &idx) in self.sequence.iter().enumerate() {
            out[row * 20 + idx] = 1.0;
        }
        out
    }

    /// The stored distance matrix, or one derived from coordinates.
    pub fn distance_matrix(&self) -> Result<DistanceMatrix> {
        if let Some(d) = &self.distances {
            return Ok(d.clone());
        }
        match &self.coords {
            Some(c) => Ok(distance_matrix(c)),
            None => Err(Error::Data(format!(
                "loop {} has neither coordinates nor a distance matrix",
                self.id
            ))),
        }
    }
}

// ── PDB ingestion ────────────────────────────────────────────────────

/// One retained alpha-carbon ATOM record.
#[derive(Debug, Clone, PartialEq)]
pub struct PdbRecord {
    pub chain: char,
    pub res_seq: i32,
    pub res_name: String,
    pub atom_name: String,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

fn field(line: &str, lo: usize, hi: usize) -> &str {
    // 0-based byte range; PDB files are ASCII.
    &line[lo..hi]
}

fn parse_coord(line: &str, lo: usize, hi: usize, lineno: usize, what: &str) -> Result<f64> {
    field(line, lo, hi).trim().parse::<f64>().map_err(|_| Error::Parse {
        line: lineno,
        msg: format!("malformed {what} coordinate field {:?}", field(line, lo, hi)),
    })
}

/// Parse the alpha-carbon ATOM records of a PDB-format text.
///
/// Fixed 1-indexed columns: atom name 13-16, residue name 18-20, chain 22,
/// residue number 23-26, x 31-38, y 39-46, z 47-54. Non-ATOM lines are
/// skipped; ATOM lines whose atom name is not CA are skipped; a CA line
/// truncated inside the coordinate fields is a parse error naming the line.
pub fn parse_pdb(text: &str) -> Result<Vec<PdbRecord>> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if !line.starts_with("ATOM") {
            continue;
        }
        if line.len() < 16 {
            return Err(Error::Parse { line: lineno, msg: "ATOM record truncated before the atom name".into() });
        }
        let atom_name = field(line, 12, 16).trim();
        if atom_name != "CA" {
            continue;
        }
        if line.len() < 54 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("CA record truncated at {} columns, need 54", line.len()),
            });
        }
        let res_name = field(line, 17, 20).trim().to_string();
        let chain = line.as_bytes()[21] as char;
        let res_seq = field(line, 22, 26).trim().parse::<i32>().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("malformed residue number {:?}", field(line, 22, 26)),
        })?;
        let x = parse_coord(line, 30, 38, lineno, "x")?;
        let y = parse_coord(line, 38, 46, lineno, "y")?;
        let z = parse_coord(line, 46, 54, lineno, "z")?;
        records.push(PdbRecord { chain, res_seq, res_name, atom_name: "CA".into(), x, y, z });
    }
    Ok(records)
}

/// Render an alpha-carbon ATOM line in the fixed-column layout read back by
/// [`parse_pdb`]; coordinates carry the format's 3-decimal precision.
pub fn format_ca_line(serial: usize, res_name: &str, chain: char, res_seq: i32, x: f64, y: f64, z: f64) -> String {
    format!(
        "ATOM  {serial:>5}  CA  {res_name:<3} {chain}{res_seq:>4}    {x:>8.3}{y:>8.3}{z:>8.3}  1.00  0.00           C"
    )
}

/// Slice a CDR loop out of parsed records by chain and an inclusive,
/// contiguous residue-number range.
pub fn extract_cdr<F>(
    records: &[PdbRecord],
    chain: char,
    range: (i32, i32),
    map: F,
    id: &str,
    class: LoopClass,
) -> Result<CdrLoop>
where
    F: Fn(&str) -> Option<char>,
{
    let (lo, hi) = range;
    if lo > hi {
        return Err(Error::Data(format!("empty residue range {lo}..={hi}")));
    }
    let mut by_num: BTreeMap<i32, &PdbRecord> = BTreeMap::new();
    for r in records.iter().filter(|r| r.chain == chain) {
        by_num.entry(r.res_seq).or_insert(r);
    }
    let missing: Vec<i32> = (lo..=hi).filter(|n| !by_num.contains_key(n)).collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "chain {chain} residue range {lo}..={hi} has gaps at {missing:?}"
        )));
    }
    let mut sequence = Vec::new();
    let mut points = Vec::new();
    for num in lo..=hi {
        let r = by_num[&num];
        let letter = map(&r.res_name).ok_or_else(|| {
            Error::Data(format!("residue name {:?} at {num} is outside the alphabet", r.res_name))
        })?;
        let idx = aa_index(letter).ok_or_else(|| {
            Error::Data(format!("mapped letter {letter:?} at {num} is outside the alphabet"))
        })?;
        sequence.push(idx);
        points.push([r.x, r.y, r.z]);
    }
    let coords = Coordinates::new(points)?;
    CdrLoop::new(id, class, sequence, Some(coords), None)
}

// ── Synthetic loops ──────────────────────────────────────────────────

fn unit(v: [f64; 3]) -> Option<[f64; 3]> {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if n < 1e-12 {
        None
    } else {
        Some([v[0] / n, v[1] / n, v[2] / n])
    }
}

fn gauss3(rng: &mut impl Rng) -> [f64; 3] {
    [
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
    ]
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Any two unit vectors orthogonal to `e` and to each other.
fn orthonormal_pair(e: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    let pick = if e[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let u = unit([
        e[1] * pick[2] - e[2] * pick[1],
        e[2] * pick[0] - e[0] * pick[2],
        e[0] * pick[1] - e[1] * pick[0],
    ])
    .expect("cross of non-parallel unit vectors");
    let v = [
        e[1] * u[2] - e[2] * u[1],
        e[2] * u[0] - e[0] * u[2],
        e[0] * u[1] - e[1] * u[0],
    ];
    (u, v)
}

fn attempt_chain(spec: &ValiditySpec, n: usize, rng: &mut impl Rng) -> Option<Vec<[f64; 3]>> {
    let bonds = (n - 1) as f64;
    let target = {
        let hi = spec.eps2.min(0.98 * bonds * spec.eta2);
        if hi < spec.eps1 {
            return None;
        }
        rng.gen_range(spec.eps1..=hi)
    };
    let mut pts: Vec<[f64; 3]> = Vec::with_capacity(n);
    pts.push([0.0, 0.0, 0.0]);
    let mut dir = unit(gauss3(rng))?;
    let b0 = rng.gen_range(spec.eta1..=spec.eta2);
    pts.push([b0 * dir[0], b0 * dir[1], b0 * dir[2]]);

    // Smooth steered walk: every step keeps the remaining walk able to land
    // the end-to-end distance on the target.
    for j in 2..n - 1 {
        let remaining = (n - 1 - j) as f64;
        let slack = 0.9 * remaining * spec.eta2;
        let b = rng.gen_range(spec.eta1..=spec.eta2);
        let cur = pts[j - 1];
        let mut placed = None;
        for _ in 0..60 {
            let noise = gauss3(rng);
            let cand_dir = unit([
                0.7 * dir[0] + 0.7 * noise[0],
                0.7 * dir[1] + 0.7 * noise[1],
                0.7 * dir[2] + 0.7 * noise[2],
            ])?;
            let cand = [cur[0] + b * cand_dir[0], cur[1] + b * cand_dir[1], cur[2] + b * cand_dir[2]];
            let rho = dist(cand, pts[0]);
            if (rho - target).abs() <= slack {
                placed = Some((cand, cand_dir));
                break;
            }
        }
        let (cand, cand_dir) = match placed {
            Some(p) => p,
            None => {
                // Steer straight toward or away from the anchor.
                let rho_cur = dist(cur, pts[0]);
                let toward = unit([pts[0][0] - cur[0], pts[0][1] - cur[1], pts[0][2] - cur[2]])?;
                let sign = if rho_cur > target { 1.0 } else { -1.0 };
                let d = unit([
                    sign * toward[0] + 0.2 * dir[0],
                    sign * toward[1] + 0.2 * dir[1],
                    sign * toward[2] + 0.2 * dir[2],
                ])?;
                let cand = [cur[0] + b * d[0], cur[1] + b * d[1], cur[2] + b * d[2]];
                if (dist(cand, pts[0]) - target).abs() > slack {
                    return None;
                }
                (cand, d)
            }
        };
        pts.push(cand);
        dir = cand_dir;
    }

    // Close the loop: the last point sits on the intersection of a bond
    // sphere around the previous point and an end-to-end sphere around the
    // first point.
    let prev = pts[n - 2];
    let c = dist(prev, pts[0]);
    if c < 1e-9 {
        return None;
    }
    let r2 = target.clamp((c - 0.99 * spec.eta2).max(spec.eps1), (c + 0.99 * spec.eta2).min(spec.eps2));
    if !(spec.eps1..=spec.eps2).contains(&r2) {
        return None;
    }
    let r1_lo = spec.eta1.max((c - r2).abs());
    if r1_lo > spec.eta2 {
        return None;
    }
    let r1 = rng.gen_range(r1_lo..=spec.eta2);
    if c > r1 + r2 {
        return None;
    }
    let e = unit([prev[0] - pts[0][0], prev[1] - pts[0][1], prev[2] - pts[0][2]])?;
    // Distance from the anchor along e to the intersection plane.
    let x = (c * c + r2 * r2 - r1 * r1) / (2.0 * c);
    let h2 = r2 * r2 - x * x;
    if h2 < 0.0 {
        return None;
    }
    let h = h2.sqrt();
    let (u, v) = orthonormal_pair(e);
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    let last = [
        pts[0][0] + x * e[0] + h * (theta.cos() * u[0] + theta.sin() * v[0]),
        pts[0][1] + x * e[1] + h * (theta.cos() * u[1] + theta.sin() * v[1]),
        pts[0][2] + x * e[2] + h * (theta.cos() * u[2] + theta.sin() * v[2]),
    ];
    pts.push(last);
    Some(pts)
}

/// Generate a random valid loop: a smooth random walk with bond lengths in
/// `[eta1, eta2]`, steered so the end-to-end distance closes into
/// `[eps1, eps2]`, carrying a uniformly random sequence. Every output passes
/// [`check_validity`]; an exhausted rejection budget is a synthesis error.
pub fn synthesize_loop(
    spec: &ValiditySpec,
    n: usize,
    id: &str,
    class: LoopClass,
    rng: &mut impl Rng,
) -> Result<CdrLoop> {
    if n < 2 {
        return Err(Error::Contract(format!("loop needs at least 2 residues, got {n}")));
    }
    if n == 2 {
        let lo = spec.eta1.max(spec.eps1);
        let hi = spec.eta2.min(spec.eps2);
        if lo > hi {
            return Err(Error::Synthesis(format!(
                "n=2 needs overlapping bond and loop windows, got [{}, {}] and [{}, {}]",
                spec.eta1, spec.eta2, spec.eps1, spec.eps2
            )));
        }
        let d = rng.gen_range(lo..=hi);
        let dir = unit(gauss3(rng)).expect("gaussian direction");
        let coords = Coordinates::new(vec![[0.0; 3], [d * dir[0], d * dir[1], d * dir[2]]])?;
        let sequence = (0..2).map(|_| rng.gen_range(0..20)).collect();
        return CdrLoop::new(id, class, sequence, Some(coords), None);
    }
    if (n - 1) as f64 * spec.eta2 < spec.eps1 {
        return Err(Error::Synthesis(format!(
            "a {n}-residue chain with bonds <= {} cannot span the loop window starting at {}",
            spec.eta2, spec.eps1
        )));
    }
    let budget = 2000;
    for _ in 0..budget {
        if let Some(pts) = attempt_chain(spec, n, rng) {
            let coords = Coordinates::new(pts)?;
            let d = distance_matrix(&coords);
            if check_validity(&d, spec).valid {
                let sequence = (0..n).map(|_| rng.gen_range(0..20)).collect();
                return CdrLoop::new(id, class, sequence, Some(coords), None);
            }
        }
    }
    Err(Error::Synthesis(format!(
        "rejection budget of {budget} attempts exhausted for n={n}, spec {spec:?}"
    )))
}

// ── Dataset files and splits ─────────────────────────────────────────

/// Split label of a loop inside a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split label {other:?}"))),
        }
    }
}

/// A set of loops of one class with a split partition.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub class: LoopClass,
    pub loops: Vec<CdrLoop>,
    pub splits: Vec<Split>,
}

impl Dataset {
    pub fn new(class: LoopClass, loops: Vec<CdrLoop>, splits: Vec<Split>) -> Result<Self> {
        if loops.len() != splits.len() {
            return Err(Error::Data(format!(
                "{} loops but {} split labels",
                loops.len(),
                splits.len()
            )));
        }
        if let Some(l) = loops.iter().find(|l| l.class != class) {
            return Err(Error::Data(format!(
                "loop {} has class {} in a {} dataset",
                l.id,
                l.class.as_str(),
                class.as_str()
            )));
        }
        Ok(Self { class, loops, splits })
    }

    /// Deterministically assign splits by a seeded shuffle with the given
    /// train/validation/test weights (the conventional split is 8:1:1).
    pub fn with_split(class: LoopClass, loops: Vec<CdrLoop>, weights: (usize, usize, usize), seed: u64) -> Result<Self> {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let n = loops.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
        let total = weights.0 + weights.1 + weights.2;
        if total == 0 {
            return Err(Error::Config("split weights sum to zero".into()));
        }
        let n_train = n * weights.0 / total;
        let n_val = n * weights.1 / total;
        let mut splits = vec![Split::Train; n];
        for (rank, &idx) in order.iter().enumerate() {
            splits[idx] = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Validation
            } else {
                Split::Test
            };
        }
        Self::new(class, loops, splits)
    }

    pub fn len(&self) -> usize {
        self.loops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.loops.is_empty()
    }

    pub fn split(&self, which: Split) -> Vec<&CdrLoop> {
        self.loops
            .iter()
            .zip(&self.splits)
            .filter(|(_, s)| **s == which)
            .map(|(l, _)| l)
            .collect()
    }

    pub fn max_len(&self) -> usize {
        self.loops.iter().map(|l| l.len()).max().unwrap_or(0)
    }
}

const LOOPSET_HEADER: &str = "#loopset\tv1";

fn encode_floats(values: &[f64]) -> String {
    let mut s = String::new();
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        let _ = write!(s, "{v}");
    }
    s
}

fn decode_floats(s: &str, index: usize) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::Data(format!("record {index}: bad float {t:?}")))
        })
        .collect()
}

/// Serialize one loop as a tab-separated line:
/// `id  class  split  sequence  coords  distances`, with `-` for absent
/// optional fields, coordinates as a flat x,y,z,... list and distances as
/// the upper triangle in row-major order.
fn encode_loop(l: &CdrLoop, split: Option<Split>) -> String {
    let coords = match &l.coords {
        Some(c) => {
            let flat: Vec<f64> = c.points().iter().flatten().copied().collect();
            encode_floats(&flat)
        }
        None => "-".into(),
    };
    let dmat = match &l.distances {
        Some(d) => {
            let n = d.n();
            let mut tri = Vec::with_capacity(n * (n - 1) / 2);
            for i in 0..n {
                for j in (i + 1)..n {
                    tri.push(d.get(i, j));
                }
            }
            encode_floats(&tri)
        }
        None => "-".into(),
    };
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}",
        l.id,
        l.class.as_str(),
        split.map_or("-", |s| s.as_str()),
        l.sequence_string(),
        coords,
        dmat
    )
}

fn decode_loop(line: &str, index: usize) -> Result<(CdrLoop, Option<Split>)> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 6 {
        return Err(Error::Data(format!(
            "record {index}: expected 6 tab-separated fields, got {}",
            fields.len()
        )));
    }
    let id = fields[0];
    let class = LoopClass::parse(fields[1]).map_err(|e| Error::Data(format!("record {index}: {e}")))?;
    let split = if fields[2] == "-" { None } else { Some(Split::parse(fields[2])?) };
    let seq = fields[3];
    let n = seq.chars().count();
    if n == 0 {
        return Err(Error::Data(format!("record {index}: empty sequence")));
    }
    let coords = if fields[4] == "-" {
        None
    } else {
        let flat = decode_floats(fields[4], index)?;
        if flat.len() != 3 * n {
            return Err(Error::Data(format!(
                "record {index}: sequence length {n} does not match coordinate count {}",
                flat.len() / 3
            )));
        }
        Some(Coordinates::new(flat.chunks(3).map(|c| [c[0], c[1], c[2]]).collect())?)
    };
    let distances = if fields[5] == "-" {
        None
    } else {
        let tri = decode_floats(fields[5], index)?;
        if tri.len() != n * (n - 1) / 2 {
            return Err(Error::Data(format!(
                "record {index}: sequence length {n} does not match triangle length {}",
                tri.len()
            )));
        }
        let mut values = vec![0.0; n * n];
        let mut k = 0;
        for i in 0..n {
            for j in (i + 1)..n {
                values[i * n + j] = tri[k];
                values[j * n + i] = tri[k];
                k += 1;
            }
        }
        Some(DistanceMatrix::from_values(n, values)?)
    };
    let l = CdrLoop::from_letters(id, class, seq, coords).and_then(|mut l| {
        l.distances = distances;
        if let Some(d) = &l.distances {
            if d.n() != l.len() {
                return Err(Error::Data(format!("record {index}: distance matrix size mismatch")));
            }
        }
        Ok(l)
    })?;
    Ok((l, split))
}

/// Write a dataset in the line-delimited loopset format.
pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(LOOPSET_HEADER);
    out.push('\n');
    for (l, s) in ds.loops.iter().zip(&ds.splits) {
        out.push_str(&encode_loop(l, Some(*s)));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Read a dataset written by [`save_dataset`]. Every record must carry a
/// split label; ordering is preserved.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == LOOPSET_HEADER => {}
        other => {
            return Err(Error::Data(format!(
                "missing loopset header, found {:?}",
                other.unwrap_or("")
            )))
        }
    }
    let mut loops = Vec::new();
    let mut splits = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let (l, s) = decode_loop(line, i + 1)?;
        let s = s.ok_or_else(|| Error::Data(format!("record {}: missing split label", i + 1)))?;
        loops.push(l);
        splits.push(s);
    }
    if loops.is_empty() {
        return Err(Error::Data("dataset has no records".into()));
    }
    let class = loops[0].class;
    Dataset::new(class, loops, splits)
}

/// Write generated loops (no split labels) in the same line format.
pub fn save_loops(loops: &[CdrLoop], path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(LOOPSET_HEADER);
    out.push('\n');
    for l in loops {
        out.push_str(&encode_loop(l, None));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Read loops from a loopset file, ignoring split labels.
pub fn load_loops(path: &Path) -> Result<Vec<CdrLoop>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == LOOPSET_HEADER => {}
        other => {
            return Err(Error::Data(format!(
                "missing loopset header, found {:?}",
                other.unwrap_or("")
            )))
        }
    }
    let mut loops = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let (l, _) = decode_loop(line, i + 1)?;
        loops.push(l);
    }
    Ok(loops)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn parse_pdb_single_ca_line() {
        let line = format_ca_line(1, "GLY", 'H', 100, 1.0, 2.0, 3.0);
        let records = parse_pdb(&line).unwrap();
        assert_eq!(records.len(), 1);
        let r = &records[0];
        assert_eq!(r.chain, 'H');
        assert_eq!(r.res_seq, 100);
        assert_eq!(r.res_name, "GLY");
        assert_eq!((r.x, r.y, r.z), (1.0, 2.0, 3.0));
    }

    #[test]
    fn parse_pdb_skips_hetatm_and_non_ca() {
        let text = "HETATM    1  O   HOH A 101      0.000   0.000   0.000\n\
                    ATOM      2  N   GLY A 100      1.000   1.000   1.000                       N\n\
                    REMARK nothing\n";
        assert!(parse_pdb(text).unwrap().is_empty());
    }

    #[test]
    fn parse_pdb_truncated_ca_line_is_error() {
        let full = format_ca_line(1, "ALA", 'H', 5, 1.0, 2.0, 3.0);
        let truncated = &full[..45];
        match parse_pdb(truncated) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn parse_pdb_bad_coordinate_is_error() {
        let mut line = format_ca_line(1, "ALA", 'H', 5, 1.0, 2.0, 3.0);
        line.replace_range(30..38, "  xx.yyy");
        match parse_pdb(&line) {
            Err(Error::Parse { line, msg }) => {
                assert_eq!(line, 1);
                assert!(msg.contains('x'), "{msg}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn pdb_render_parse_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut text = String::new();
        let mut expected = Vec::new();
        for i in 0..7 {
            let (x, y, z) = (
                rng.gen_range(-99.0..99.0),
                rng.gen_range(-99.0..99.0),
                rng.gen_range(-99.0..99.0),
            );
            text.push_str(&format_ca_line(i + 1, "ALA", 'H', 10 + i as i32, x, y, z));
            text.push('\n');
            expected.push((10 + i as i32, x, y, z));
        }
        let records = parse_pdb(&text).unwrap();
        assert_eq!(records.len(), 7);
        for (r, (num, x, y, z)) in records.iter().zip(expected) {
            assert_eq!(r.chain, 'H');
            assert_eq!(r.res_seq, num);
            // The format carries 3 decimals.
            assert!((r.x - x).abs() <= 5e-4 + 1e-12);
            assert!((r.y - y).abs() <= 5e-4 + 1e-12);
            assert!((r.z - z).abs() <= 5e-4 + 1e-12);
        }
    }

    #[test]
    fn extract_cdr_full_range() {
        let mut text = String::new();
        let names = ["GLY", "ALA", "TYR", "ARG", "ALA", "MET", "ASP"];
        for (i, name) in names.iter().enumerate() {
            text.push_str(&format_ca_line(i + 1, name, 'H', 95 + i as i32, i as f64 * 3.8, 0.0, 0.0));
            text.push('\n');
        }
        let records = parse_pdb(&text).unwrap();
        let l = extract_cdr(&records, 'H', (95, 101), three_to_one, "5iwl_h3", LoopClass::H3).unwrap();
        assert_eq!(l.len(), 7);
        assert_eq!(l.sequence_string(), "GAYRAMD");
        let p3 = l.coords.as_ref().unwrap().point(3);
        // The fixed-column format carries 3 decimals.
        assert!((p3[0] - 3.0 * 3.8).abs() <= 5e-4);
        assert_eq!((p3[1], p3[2]), (0.0, 0.0));
    }

    #[test]
    fn extract_cdr_gap_lists_missing_numbers() {
        let mut text = String::new();
        for num in [95, 96, 99] {
            text.push_str(&format_ca_line(1, "GLY", 'H', num, 0.0, 0.0, 0.0));
            text.push('\n');
        }
        let records = parse_pdb(&text).unwrap();
        match extract_cdr(&records, 'H', (95, 99), three_to_one, "x", LoopClass::H3) {
            Err(Error::Data(msg)) => {
                assert!(msg.contains("97") && msg.contains("98"), "{msg}");
            }
            other => panic!("expected gap error, got {other:?}"),
        }
    }

    #[test]
    fn extract_cdr_unknown_residue_is_alphabet_error() {
        let text = format_ca_line(1, "ALA", 'H', 1, 0.0, 0.0, 0.0)
            + "\n"
            + &format_ca_line(2, "UNK", 'H', 2, 3.8, 0.0, 0.0);
        let records = parse_pdb(&text).unwrap();
        match extract_cdr(&records, 'H', (1, 2), three_to_one, "x", LoopClass::H3) {
            Err(Error::Data(msg)) => assert!(msg.contains("UNK"), "{msg}"),
            other => panic!("expected alphabet error, got {other:?}"),
        }
    }

    #[test]
    fn three_letter_spot_checks() {
        assert_eq!(three_to_one("GLY"), Some('G'));
        assert_eq!(three_to_one("ALA"), Some('A'));
        assert_eq!(three_to_one("TRP"), Some('W'));
        assert_eq!(three_to_one("XXX"), None);
    }

    #[test]
    fn synthesized_loops_are_valid() {
        let spec = ValiditySpec::preset(LoopClass::H3);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in [3, 5, 8, 12, 16] {
            let l = synthesize_loop(&spec, n, &format!("s{n}"), LoopClass::H3, &mut rng).unwrap();
            assert_eq!(l.len(), n);
            let d = l.distance_matrix().unwrap();
            assert!(check_validity(&d, &spec).valid, "n={n}");
        }
    }

    #[test]
    fn synthesized_two_point_loop_or_conflict_error() {
        // H3 windows do not overlap for n=2: bonds top out at 3.88 but the
        // loop window starts at 6.5.
        let spec = ValiditySpec::preset(LoopClass::H3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            synthesize_loop(&spec, 2, "x", LoopClass::H3, &mut rng),
            Err(Error::Synthesis(_))
        ));
        // A compatible spec succeeds.
        let wide = ValiditySpec::new(3.0, 4.0, 3.5, 6.0).unwrap();
        let l = synthesize_loop(&wide, 2, "x", LoopClass::H3, &mut rng).unwrap();
        let d = l.distance_matrix().unwrap();
        assert!(d.get(0, 1) >= 3.5 && d.get(0, 1) <= 4.0);
    }

    #[test]
    fn synthesized_bond_histogram_stays_in_window() {
        let spec = ValiditySpec::preset(LoopClass::H3);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut count = 0;
        for k in 0..1000 {
            let n = 3 + (k % 10);
            let l = synthesize_loop(&spec, n, "h", LoopClass::H3, &mut rng).unwrap();
            let d = l.distance_matrix().unwrap();
            for i in 0..n - 1 {
                let b = d.get(i, i + 1);
                assert!((3.71..=3.88).contains(&b), "bond {b}");
                count += 1;
            }
            let e = d.get(0, n - 1);
            assert!((6.5..=8.5).contains(&e), "end-to-end {e}");
        }
        assert!(count > 1000);
    }

    #[test]
    fn dataset_roundtrip_and_schema_errors() {
        let spec = ValiditySpec::preset(LoopClass::H3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let loops: Vec<CdrLoop> = (0..10)
            .map(|i| synthesize_loop(&spec, 6 + i % 4, &format!("l{i}"), LoopClass::H3, &mut rng).unwrap())
            .collect();
        let ds = Dataset::with_split(LoopClass::H3, loops, (8, 1, 1), 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.tsv");
        save_dataset(&ds, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(loaded.len(), ds.len());
        for (a, b) in ds.loops.iter().zip(&loaded.loops) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.sequence, b.sequence);
            // Full double precision survives the text roundtrip.
            assert_eq!(a.coords.as_ref().unwrap().points(), b.coords.as_ref().unwrap().points());
        }
        assert_eq!(ds.splits, loaded.splits);

        // A corrupted record reports its index.
        let mut text = std::fs::read_to_string(&path).unwrap();
        text = text.replace('\n', "\n", );
        let mut lines: Vec<&str> = text.lines().collect();
        let broken = lines[2].rsplit_once('\t').unwrap().0.to_string() + "\t1.0,2.0";
        lines[2] = &broken;
        let bad_path = dir.path().join("bad.tsv");
        std::fs::write(&bad_path, lines.join("\n")).unwrap();
        match load_dataset(&bad_path) {
            Err(Error::Data(msg)) => assert!(msg.contains("record 2"), "{msg}"),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn split_is_deterministic_partition() {
        let spec = ValiditySpec::preset(LoopClass::H3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let loops: Vec<CdrLoop> = (0..40)
            .map(|i| synthesize_loop(&spec, 5 + i % 6, &format!("l{i}"), LoopClass::H3, &mut rng).unwrap())
            .collect();
        let a = Dataset::with_split(LoopClass::H3, loops.clone(), (8, 1, 1), 123).unwrap();
        let b = Dataset::with_split(LoopClass::H3, loops, (8, 1, 1), 123).unwrap();
        assert_eq!(a.splits, b.splits);
        let total = a.split(Split::Train).len() + a.split(Split::Validation).len() + a.split(Split::Test).len();
        assert_eq!(total, a.len());
        assert_eq!(a.split(Split::Train).len(), 32);
        assert_eq!(a.split(Split::Validation).len(), 4);
    }

    #[test]
    fn generated_loop_with_distance_matrix_roundtrips() {
        let values = vec![
            0.0, 3.8, 7.1, //
            3.8, 0.0, 3.75, //
            7.1, 3.75, 0.0,
        ];
        let d = DistanceMatrix::from_values(3, values).unwrap();
        let mut l = CdrLoop::from_letters("g0", LoopClass::H3, "GAY", None).unwrap();
        l.distances = Some(d.clone());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gen.tsv");
        save_loops(&[l.clone()], &path).unwrap();
        let loaded = load_loops(&path).unwrap();
        assert_eq!(loaded.len(), 1);
        assert_eq!(loaded[0].distances.as_ref().unwrap().values(), d.values());
        assert!(loaded[0].coords.is_none());
    }
}
