//! Seekable binary dataset format for labeled instance files.
//!
//! Layout (little-endian):
//!   magic "TSPD" | version u32 | kind u8 | label u8 | n u32 | count u64 | seed u64
//! followed by `count` fixed-size records:
//!   coords n*2 f64 | [perm n*u32 | cost f64]   (label section only if labeled)
//!
//! Fixed record size makes streaming single-pass training a seek away.

use super::{
    generate, held_karp, nn_two_opt, DistributionKind, InstanceError, Source, TspInstance,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"TSPD";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelKind {
    None,
    HeldKarp,
    NnTwoOpt,
}

impl LabelKind {
    fn to_byte(self) -> u8 {
        match self {
            LabelKind::None => 0,
            LabelKind::HeldKarp => 1,
            LabelKind::NnTwoOpt => 2,
        }
    }
    fn from_byte(b: u8) -> Result<Self, InstanceError> {
        match b {
            0 => Ok(LabelKind::None),
            1 => Ok(LabelKind::HeldKarp),
            2 => Ok(LabelKind::NnTwoOpt),
            other => Err(InstanceError::Dataset(format!("bad label byte {other}"))),
        }
    }
}

impl std::str::FromStr for LabelKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(Self::None),
            "heldkarp" => Ok(Self::HeldKarp),
            "nn2opt" => Ok(Self::NnTwoOpt),
            other => Err(format!("unknown label kind: {other}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub kind: DistributionKind,
    pub label: LabelKind,
    pub n: usize,
    pub count: u64,
    pub seed: u64,
}

impl DatasetHeader {
    pub fn record_size(&self) -> u64 {
        let mut sz = self.n as u64 * 16;
        if self.label != LabelKind::None {
            sz += self.n as u64 * 4 + 8;
        }
        sz
    }
}

fn kind_byte(kind: DistributionKind) -> u8 {
    match kind {
        DistributionKind::Uniform => 0,
        DistributionKind::Explosion => 1,
        DistributionKind::Implosion => 2,
        DistributionKind::Cluster => 3,
    }
}

fn kind_from_byte(b: u8) -> Result<DistributionKind, InstanceError> {
    match b {
        0 => Ok(DistributionKind::Uniform),
        1 => Ok(DistributionKind::Explosion),
        2 => Ok(DistributionKind::Implosion),
        3 => Ok(DistributionKind::Cluster),
        other => Err(InstanceError::Dataset(format!("bad kind byte {other}"))),
    }
}

/// Per-index instance seed: instance i of a dataset draws its own RNG stream.
pub fn instance_seed(dataset_seed: u64, index: u64) -> u64 {
    // splitmix64 over (seed, index)
    let mut z = dataset_seed
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add(index)
        .wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Generates and labels `count` instances; embarrassingly parallel per
/// instance, deterministic regardless of thread count.
pub fn generate_labeled(
    kind: DistributionKind,
    n: usize,
    count: u64,
    seed: u64,
    label: LabelKind,
) -> Result<Vec<TspInstance>, InstanceError> {
    if label == LabelKind::HeldKarp && n > super::MAX_HELD_KARP_N {
        return Err(InstanceError::TooLargeExact(n));
    }
    (0..count)
        .into_par_iter()
        .map(|i| {
            let iseed = instance_seed(seed, i);
            let mut inst = generate(kind, n, iseed)?;
            match label {
                LabelKind::None => {}
                LabelKind::HeldKarp => {
                    let t = held_karp(&inst)?;
                    inst.ref_tour = Some(t.order);
                    inst.ref_cost = Some(t.cost);
                }
                LabelKind::NnTwoOpt => {
                    let t = nn_two_opt(&inst, iseed)?;
                    inst.ref_tour = Some(t.order);
                    inst.ref_cost = Some(t.cost);
                }
            }
            Ok(inst)
        })
        .collect()
}

pub fn write_dataset(
    path: &Path,
    header: &DatasetHeader,
    instances: &[TspInstance],
) -> Result<(), InstanceError> {
    if instances.len() as u64 != header.count {
        return Err(InstanceError::Dataset(format!(
            "header count {} vs {} instances",
            header.count,
            instances.len()
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[kind_byte(header.kind), header.label.to_byte()])?;
    w.write_all(&(header.n as u32).to_le_bytes())?;
    w.write_all(&header.count.to_le_bytes())?;
    w.write_all(&header.seed.to_le_bytes())?;
    for inst in instances {
        if inst.n() != header.n {
            return Err(InstanceError::Dataset("instance size mismatch".into()));
        }
        for p in &inst.coords {
            w.write_all(&p[0].to_le_bytes())?;
            w.write_all(&p[1].to_le_bytes())?;
        }
        if header.label != LabelKind::None {
            let (tour, cost) = match (&inst.ref_tour, inst.ref_cost) {
                (Some(t), Some(c)) => (t, c),
                _ => return Err(InstanceError::Dataset("missing label".into())),
            };
            for &node in tour {
                w.write_all(&node.to_le_bytes())?;
            }
            w.write_all(&cost.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub struct DatasetReader {
    file: BufReader<File>,
    pub header: DatasetHeader,
    data_start: u64,
}

impl DatasetReader {
    pub fn open(path: &Path) -> Result<Self, InstanceError> {
        let mut file = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        file.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(InstanceError::Dataset("bad magic".into()));
        }
        let mut buf4 = [0u8; 4];
        file.read_exact(&mut buf4)?;
        let version = u32::from_le_bytes(buf4);
        if version != VERSION {
            return Err(InstanceError::Dataset(format!("unsupported version {version}")));
        }
        let mut kl = [0u8; 2];
        file.read_exact(&mut kl)?;
        let kind = kind_from_byte(kl[0])?;
        let label = LabelKind::from_byte(kl[1])?;
        file.read_exact(&mut buf4)?;
        let n = u32::from_le_bytes(buf4) as usize;
        let mut buf8 = [0u8; 8];
        file.read_exact(&mut buf8)?;
        let count = u64::from_le_bytes(buf8);
        file.read_exact(&mut buf8)?;
        let seed = u64::from_le_bytes(buf8);
        let header = DatasetHeader { kind, label, n, count, seed };
        let data_start = file.stream_position()?;
        Ok(Self { file, header, data_start })
    }

    pub fn read_instance(&mut self, index: u64) -> Result<TspInstance, InstanceError> {
        let h = self.header;
        if index >= h.count {
            return Err(InstanceError::Dataset(format!(
                "index {index} out of range 0..{}",
                h.count
            )));
        }
        self.file
            .seek(SeekFrom::Start(self.data_start + index * h.record_size()))?;
        let mut coords = Vec::with_capacity(h.n);
        let mut buf8 = [0u8; 8];
        for _ in 0..h.n {
            self.file.read_exact(&mut buf8)?;
            let x = f64::from_le_bytes(buf8);
            self.file.read_exact(&mut buf8)?;
            let y = f64::from_le_bytes(buf8);
            coords.push([x, y]);
        }
        let (ref_tour, ref_cost) = if h.label != LabelKind::None {
            let mut tour = Vec::with_capacity(h.n);
            let mut buf4 = [0u8; 4];
            for _ in 0..h.n {
                self.file.read_exact(&mut buf4)?;
                tour.push(u32::from_le_bytes(buf4));
            }
            self.file.read_exact(&mut buf8)?;
            (Some(tour), Some(f64::from_le_bytes(buf8)))
        } else {
            (None, None)
        };
        Ok(TspInstance {
            coords,
            raw_coords: None,
            ref_tour,
            ref_cost,
            source: Source::Generated { kind: h.kind, seed: instance_seed(h.seed, index) },
        })
    }
}

pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<TspInstance>), InstanceError> {
    let mut reader = DatasetReader::open(path)?;
    let count = reader.header.count;
    let mut out = Vec::with_capacity(count as usize);
    for i in 0..count {
        out.push(reader.read_instance(i)?);
    }
    Ok((reader.header, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_labeled_dataset() {
        let dir = std::env::temp_dir().join("deeptour-dataset-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("rt.tspd");
        let instances =
            generate_labeled(DistributionKind::Uniform, 8, 10, 42, LabelKind::HeldKarp).unwrap();
        let header = DatasetHeader {
            kind: DistributionKind::Uniform,
            label: LabelKind::HeldKarp,
            n: 8,
            count: 10,
            seed: 42,
        };
        write_dataset(&path, &header, &instances).unwrap();
        let (h2, back) = read_dataset(&path).unwrap();
        assert_eq!(h2, header);
        for (a, b) in instances.iter().zip(&back) {
            assert_eq!(a.coords, b.coords);
            assert_eq!(a.ref_tour, b.ref_tour);
            assert_eq!(a.ref_cost, b.ref_cost);
        }
    }

    #[test]
    fn byte_identical_for_same_seed() {
        let dir = std::env::temp_dir().join("deeptour-dataset-test");
        std::fs::create_dir_all(&dir).unwrap();
        let header = DatasetHeader {
            kind: DistributionKind::Cluster,
            label: LabelKind::None,
            n: 12,
            count: 5,
            seed: 7,
        };
        let mut bytes = Vec::new();
        for name in ["a.tspd", "b.tspd"] {
            let path = dir.join(name);
            let insts =
                generate_labeled(header.kind, header.n, header.count, header.seed, header.label)
                    .unwrap();
            write_dataset(&path, &header, &insts).unwrap();
            bytes.push(std::fs::read(&path).unwrap());
        }
        assert_eq!(bytes[0], bytes[1]);
    }

    #[test]
    fn labels_match_tour_cost() {
        let insts =
            generate_labeled(DistributionKind::Uniform, 9, 5, 3, LabelKind::NnTwoOpt).unwrap();
        for inst in &insts {
            let c = super::super::tour_cost(inst, inst.ref_tour.as_ref().unwrap()).unwrap();
            assert!((c - inst.ref_cost.unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn heldkarp_label_rejects_large_n() {
        assert!(matches!(
            generate_labeled(DistributionKind::Uniform, 20, 1, 0, LabelKind::HeldKarp),
            Err(InstanceError::TooLargeExact(20))
        ));
    }
}
