//! Whipping dataset: control sampling, hindsight goal labels, the GVSD
//! record format and batch generation.
//!
//! GVSD layout (all little-endian, floats are f64):
//!
//! ```text
//! "GVSD" | u32 version | u32 D | u32 L | u32 n_points
//! times[L] | theta[2 x 4] | Q[L x D] | Qd[L x D]
//! positions[L x n_points x 3] | velocities[L x n_points x 3] | goal[3] | valid u8
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::control::{ControlInput, JOINT_BOUNDS, N_WAYPOINTS};
use crate::dynamics::{Dynamics, Trajectory};
use crate::error::{Error, Result};
use crate::model::{Config, RodModel, DOF, RIGID_DOF};

pub const MAGIC: &[u8; 4] = b"GVSD";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MODEL_FILE: &str = "model.toml";
const RECORD_DIR: &str = "records";

/// Waypoints drawn independently and uniformly within [`JOINT_BOUNDS`].
pub fn sample_control<R: Rng + ?Sized>(rng: &mut R) -> ControlInput {
    let mut theta = [[0.0; N_WAYPOINTS]; RIGID_DOF];
    for (j, row) in theta.iter_mut().enumerate() {
        let (lo, hi) = JOINT_BOUNDS[j];
        for v in row.iter_mut() {
            *v = rng.random_range(lo..=hi);
        }
    }
    ControlInput { theta }
}

/// Index of the fastest tip sample; ties go to the earliest.
pub fn strike_sample(traj: &Trajectory) -> usize {
    let mut best = (f64::NEG_INFINITY, 0);
    for (i, v) in traj.tip_speeds().enumerate() {
        if v > best.0 {
            best = (v, i);
        }
    }
    best.1
}

/// Tip position at the moment of peak tip speed.
pub fn label_goal(traj: &Trajectory) -> Result<Vector3<f64>> {
    if !traj.valid {
        return Err(Error::InvalidTrajectory("cannot label an invalid trajectory".into()));
    }
    if traj.is_empty() || traj.n_points == 0 {
        return Err(Error::InvalidTrajectory("empty trajectory".into()));
    }
    Ok(traj.position(strike_sample(traj), traj.n_points - 1))
}

/// Serializes a trajectory as a GVSD record.
pub fn encode_record(traj: &Trajectory) -> Vec<u8> {
    let len = traj.len();
    let floats = len + 2 * N_WAYPOINTS + 2 * len * DOF + 6 * len * traj.n_points + 3;
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * floats + 1);
    out.extend_from_slice(MAGIC);
    for v in [FORMAT_VERSION, DOF as u32, len as u32, traj.n_points as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut put = |x: f64| out.extend_from_slice(&x.to_le_bytes());
    traj.times.iter().for_each(|&t| put(t));
    traj.control.theta.iter().flatten().for_each(|&t| put(t));
    traj.q.iter().flat_map(|q| q.iter()).for_each(|&x| put(x));
    traj.qd.iter().flat_map(|q| q.iter()).for_each(|&x| put(x));
    traj.positions.iter().flat_map(|p| p.iter()).for_each(|&x| put(x));
    traj.velocities.iter().flat_map(|p| p.iter()).for_each(|&x| put(x));
    traj.goal.iter().for_each(|&x| put(x));
    out.push(traj.valid as u8);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.offset as u64,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.offset < n {
            return Err(self.fail(format!(
                "truncated while reading {what}: need {n} bytes, {} left",
                self.bytes.len() - self.offset
            )));
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn floats(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(8 * n, what)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

/// Parses a GVSD record; `path` is only used in error messages.
pub fn decode_record(bytes: &[u8], path: &Path) -> Result<Trajectory> {
    let mut r = Reader { bytes, offset: 0, path };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if &magic != MAGIC {
        r.offset = 0;
        return Err(r.fail(format!(
            "bad magic: expected {:?}, found {:?}",
            String::from_utf8_lossy(MAGIC),
            String::from_utf8_lossy(&magic)
        )));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        r.offset -= 4;
        return Err(r.fail(format!("unsupported version {version} (expected {FORMAT_VERSION})")));
    }
    let dof = r.u32("D")? as usize;
    if dof != DOF {
        r.offset -= 4;
        return Err(r.fail(format!("D = {dof}, expected {DOF}")));
    }
    let len = r.u32("L")? as usize;
    let n_points = r.u32("n_points")? as usize;
    if len == 0 || n_points == 0 {
        r.offset -= 8;
        return Err(r.fail(format!("empty record (L = {len}, n_points = {n_points})")));
    }
    let times = r.floats(len, "times")?;
    let theta = r.floats(2 * N_WAYPOINTS, "theta")?;
    let q = r.floats(len * DOF, "Q")?;
    let qd = r.floats(len * DOF, "Qd")?;
    let positions = r.floats(len * n_points * 3, "positions")?;
    let velocities = r.floats(len * n_points * 3, "velocities")?;
    let goal = r.floats(3, "goal")?;
    let valid = match r.take(1, "valid flag")?[0] {
        0 => false,
        1 => true,
        other => {
            r.offset -= 1;
            return Err(r.fail(format!("valid flag must be 0 or 1, found {other}")));
        }
    };
    if r.offset != bytes.len() {
        return Err(r.fail(format!("{} trailing bytes", bytes.len() - r.offset)));
    }
    let configs = |v: &[f64]| v.chunks_exact(DOF).map(Config::from_column_slice).collect::<Vec<_>>();
    let points = |v: &[f64]| v.chunks_exact(3).map(Vector3::from_column_slice).collect::<Vec<_>>();
    let mut control = ControlInput::zero();
    for (j, row) in control.theta.iter_mut().enumerate() {
        row.copy_from_slice(&theta[j * N_WAYPOINTS..(j + 1) * N_WAYPOINTS]);
    }
    Ok(Trajectory {
        times,
        q: configs(&q),
        qd: configs(&qd),
        positions: points(&positions),
        velocities: points(&velocities),
        n_points,
        control,
        goal: Vector3::from_column_slice(&goal),
        valid,
    })
}

pub fn write_record(path: &Path, traj: &Trajectory) -> Result<()> {
    // Write-then-rename so an interrupted run never leaves a partial record.
    let tmp = path.with_extension("gvsd.partial");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&encode_record(traj)).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_record(path: &Path) -> Result<Trajectory> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_record(&bytes, path)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Deterministic 90/10 split keyed on the record index.
pub fn split_of(index: usize) -> Split {
    let digest = Sha256::digest((index as u64).to_le_bytes());
    let key = u64::from_le_bytes(digest[..8].try_into().unwrap());
    if key % 10 == 0 {
        Split::Test
    } else {
        Split::Train
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordEntry {
    pub index: usize,
    /// Relative to the dataset directory; absent for filtered trajectories.
    pub path: Option<String>,
    pub goal: [f64; 3],
    pub valid: bool,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub n_requested: usize,
    pub n_valid: usize,
    pub seed: u64,
    pub model_hash: String,
    pub records: Vec<RecordEntry>,
}

impl DatasetManifest {
    pub fn filter_rate(&self) -> f64 {
        if self.n_requested == 0 {
            0.0
        } else {
            1.0 - self.n_valid as f64 / self.n_requested as f64
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    /// SHA-256 of the manifest's JSON text.
    pub fn content_hash(&self) -> String {
        hex(&Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path,
            offset: 0,
            reason: e.to_string(),
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, self.to_json()).map_err(|e| Error::io(&path, e))
    }

    pub fn entries(&self, split: Split) -> impl Iterator<Item = &RecordEntry> {
        self.records.iter().filter(move |r| r.valid && r.split == split)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// RNG for record `index`: the run seed with the index as stream id.
pub fn record_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

#[derive(Clone, Debug, Default)]
pub struct GenerateOptions {
    /// Worker threads; `None` uses rayon's default.
    pub threads: Option<usize>,
}

fn record_name(index: usize) -> String {
    format!("{RECORD_DIR}/{index:06}.gvsd")
}

/// Simulates record `index` of run `seed` and labels its goal; invalid runs
/// are returned unlabeled.
pub fn simulate_record(dynamics: &Dynamics, seed: u64, index: usize) -> Result<Trajectory> {
    let control = sample_control(&mut record_rng(seed, index));
    let mut traj = dynamics.simulate(&control);
    if traj.valid {
        traj.goal = label_goal(&traj)?;
    }
    Ok(traj)
}

fn generate_one(dynamics: &Dynamics, dir: &Path, seed: u64, index: usize) -> Result<RecordEntry> {
    let control = sample_control(&mut record_rng(seed, index));
    let name = record_name(index);
    let path = dir.join(&name);
    let split = split_of(index);
    if path.exists() {
        if let Ok(traj) = read_record(&path) {
            if traj.valid && traj.control == control {
                return Ok(RecordEntry {
                    index,
                    path: Some(name),
                    goal: traj.goal.into(),
                    valid: true,
                    split,
                });
            }
        }
    }
    let traj = simulate_record(dynamics, seed, index)?;
    if !traj.valid {
        return Ok(RecordEntry {
            index,
            path: None,
            goal: [0.0; 3],
            valid: false,
            split,
        });
    }
    write_record(&path, &traj)?;
    Ok(RecordEntry {
        index,
        path: Some(name),
        goal: traj.goal.into(),
        valid: true,
        split,
    })
}

/// Simulates `n` sampled controls into `out_dir`. Records already present
/// from an earlier run with the same seed are reused.
pub fn generate(
    model: &RodModel,
    n: usize,
    seed: u64,
    out_dir: &Path,
    options: &GenerateOptions,
) -> Result<DatasetManifest> {
    let dynamics = Dynamics::new(model)?;
    let records_dir = out_dir.join(RECORD_DIR);
    fs::create_dir_all(&records_dir).map_err(|e| Error::io(&records_dir, e))?;
    let model_path = out_dir.join(MODEL_FILE);
    if let Ok(existing) = RodModel::load(&model_path) {
        if existing.content_hash() != model.content_hash() {
            return Err(Error::validation(
                "out_dir",
                format!("{} holds a dataset for a different model", out_dir.display()),
            ));
        }
    }
    model.save(&model_path)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = options.threads {
        builder = builder.num_threads(t);
    }
    let pool = builder.build().map_err(|e| Error::Config(e.to_string()))?;
    let records: Vec<RecordEntry> = pool.install(|| {
        (0..n)
            .into_par_iter()
            .map(|i| generate_one(&dynamics, out_dir, seed, i))
            .collect::<Result<_>>()
    })?;
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        n_requested: n,
        n_valid: records.iter().filter(|r| r.valid).count(),
        seed,
        model_hash: model.content_hash(),
        records,
    };
    manifest.save(out_dir)?;
    Ok(manifest)
}

/// A generated dataset loaded into memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
    pub model: RodModel,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(dir)?;
        let model = RodModel::load(&dir.join(MODEL_FILE))?;
        if model.content_hash() != manifest.model_hash {
            return Err(Error::validation("model.toml", "hash does not match the manifest"));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            model,
        })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<Trajectory>> {
        self.manifest
            .entries(split)
            .filter_map(|e| e.path.as_ref())
            .map(|p| read_record(&self.dir.join(p)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::simulate;
    use std::f64::consts::PI;

    #[test]
    fn control_samples_cover_the_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let mut sums = [0.0; 2];
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for _ in 0..n {
            let c = sample_control(&mut rng);
            for j in 0..2 {
                for &v in &c.theta[j] {
                    sums[j] += v;
                    lo[j] = lo[j].min(v);
                    hi[j] = hi[j].max(v);
                }
            }
        }
        let mean = |j: usize| sums[j] / (4 * n) as f64;
        assert!(mean(0).abs() < 0.02);
        assert!((mean(1) + PI / 8.0).abs() < 0.02);
        assert!(lo[0] >= -PI && hi[0] <= PI && lo[0] < -3.1 && hi[0] > 3.1);
        assert!(lo[1] >= -PI / 2.0 && hi[1] <= PI / 4.0);
        let a = sample_control(&mut record_rng(9, 3));
        let b = sample_control(&mut record_rng(9, 3));
        assert_eq!(a, b);
        assert_ne!(a, sample_control(&mut record_rng(9, 4)));
    }

    fn synthetic(len: usize, spike: Option<usize>) -> Trajectory {
        let mut t = Trajectory::empty(ControlInput::zero(), 3);
        t.times.truncate(len);
        t.q.truncate(len);
        t.qd.truncate(len);
        t.positions.truncate(len * 3);
        t.velocities.truncate(len * 3);
        for i in 0..len {
            t.positions[i * 3 + 2] = Vector3::new(i as f64, 0.0, 0.0);
        }
        if let Some(k) = spike {
            t.velocities[k * 3 + 2] = Vector3::new(0.0, 5.0, 0.0);
        }
        t.valid = true;
        t
    }

    #[test]
    fn goal_is_tip_at_peak_speed() {
        assert_eq!(label_goal(&synthetic(10, None)).unwrap(), Vector3::zeros());
        assert_eq!(label_goal(&synthetic(10, Some(6))).unwrap(), Vector3::new(6.0, 0.0, 0.0));
        let mut bad = synthetic(10, Some(6));
        bad.valid = false;
        assert!(matches!(label_goal(&bad), Err(Error::InvalidTrajectory(_))));
    }

    #[test]
    fn stationary_rope_goal_is_initial_tip() {
        let model = RodModel {
            gravity: [0.0; 3],
            ..RodModel::default()
        };
        let traj = simulate(&model, &ControlInput::zero());
        assert_eq!(strike_sample(&traj), 0);
        assert_eq!(label_goal(&traj).unwrap(), traj.position(0, traj.n_points - 1));
    }

    #[test]
    fn whip_goal_lies_on_the_tip_trace() {
        let traj = simulate(&RodModel::default(), &sample_control(&mut record_rng(5, 0)));
        assert!(traj.valid);
        let goal = label_goal(&traj).unwrap();
        assert!(traj.tip_positions().any(|p| p == goal));
        assert!(goal.norm() <= RodModel::default().workspace_radius());
    }

    fn random_record(rng: &mut ChaCha8Rng) -> Trajectory {
        let len = rng.random_range(1..12);
        let n_points = rng.random_range(1..5);
        let mut t = Trajectory::empty(sample_control(rng), n_points);
        t.times = (0..len).map(|_| rng.random()).collect();
        t.q = (0..len).map(|_| Config::from_fn(|_, _| rng.random_range(-1e3..1e3))).collect();
        t.qd = (0..len).map(|_| Config::from_fn(|_, _| rng.random_range(-1e3..1e3))).collect();
        t.positions = (0..len * n_points).map(|_| Vector3::from_fn(|_, _| rng.random())).collect();
        t.velocities = (0..len * n_points).map(|_| Vector3::from_fn(|_, _| rng.random())).collect();
        t.goal = Vector3::from_fn(|_, _| rng.random());
        t.valid = rng.random();
        t
    }

    #[test]
    fn records_round_trip_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let path = Path::new("mem.gvsd");
        for _ in 0..100 {
            let t = random_record(&mut rng);
            let back = decode_record(&encode_record(&t), path).unwrap();
            assert_eq!(back, t);
            assert_eq!(encode_record(&back), encode_record(&t));
        }
        let mut sim = simulate(&RodModel::default(), &sample_control(&mut rng));
        sim.goal = label_goal(&sim).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("a.gvsd");
        write_record(&file, &sim).unwrap();
        assert_eq!(read_record(&file).unwrap(), sim);
        let expected = HEADER_LEN + 8 * (501 + 8 + 2 * 501 * 20 + 6 * 501 * 21 + 3) + 1;
        assert_eq!(fs::metadata(&file).unwrap().len() as usize, expected);
    }

    #[test]
    fn header_layout_is_fixed() {
        let t = simulate(&RodModel::default(), &ControlInput::zero());
        let bytes = encode_record(&t);
        assert_eq!(&bytes[..4], b"GVSD");
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        assert_eq!([word(0), word(1), word(2), word(3)], [1, 20, 501, 21]);
        let first_time = f64::from_le_bytes(bytes[20..28].try_into().unwrap());
        assert_eq!(first_time, 0.0);
        let second_time = f64::from_le_bytes(bytes[28..36].try_into().unwrap());
        assert_eq!(second_time, 1e-3);
    }

    #[test]
    fn corrupt_records_give_format_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bytes = encode_record(&random_record(&mut rng));
        let path = Path::new("bad.gvsd");
        for cut in [0, 3, 10, HEADER_LEN + 5, bytes.len() - 1] {
            match decode_record(&bytes[..cut], path) {
                Err(Error::Format { offset, reason, .. }) => {
                    assert!(offset as usize <= cut);
                    assert!(reason.contains("truncated"), "{reason}");
                }
                other => panic!("cut {cut}: {other:?}"),
            }
        }
        let mut wrong = bytes.clone();
        wrong[..4].copy_from_slice(b"HDF5");
        let err = decode_record(&wrong, path).unwrap_err().to_string();
        assert!(err.contains("GVSD") && err.contains("HDF5"), "{err}");
        let mut flag = bytes.clone();
        *flag.last_mut().unwrap() = 7;
        assert!(matches!(decode_record(&flag, path), Err(Error::Format { .. })));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(decode_record(&long, path), Err(Error::Format { .. })));
    }

    #[test]
    fn split_is_roughly_ninety_ten() {
        let test = (0..10_000).filter(|&i| split_of(i) == Split::Test).count();
        assert!((850..1150).contains(&test), "{test}");
        assert_eq!(split_of(17), split_of(17));
    }

    #[test]
    fn empty_generation() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate(&RodModel::default(), 0, 1, dir.path(), &GenerateOptions::default()).unwrap();
        assert_eq!(m.n_requested, 0);
        assert!(m.records.is_empty());
        assert_eq!(DatasetManifest::load(dir.path()).unwrap(), m);
    }
}
