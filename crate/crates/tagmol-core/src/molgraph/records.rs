use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::molecule::Molecule;
use super::vocab::{ATOM_TYPE_COUNT, BOND_TYPE_COUNT, NONE_BOND, PROTEIN_FEATURE_DIM};
use super::MolError;

/// Protein target features: 20 amino-acid composition fractions plus the
/// sequence length normalized by 1000.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProteinRecord {
    pub id: String,
    pub features: Vec<f64>,
}

impl ProteinRecord {
    pub fn new(id: String, features: Vec<f64>) -> Result<Self, MolError> {
        if features.len() != PROTEIN_FEATURE_DIM {
            return Err(MolError::Parse {
                line: None,
                msg: format!("protein features must have {} entries, got {}", PROTEIN_FEATURE_DIM, features.len()),
            });
        }
        if features.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(MolError::Parse { line: None, msg: "protein features must be finite and >= 0".into() });
        }
        let comp: f64 = features[..PROTEIN_FEATURE_DIM - 1].iter().sum();
        if (comp - 1.0).abs() > 1e-6 {
            return Err(MolError::Parse {
                line: None,
                msg: format!("composition fractions sum to {}, expected 1", comp),
            });
        }
        Ok(ProteinRecord { id, features })
    }
}

/// One training example: a protein target and its bound ligand.
#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub protein: ProteinRecord,
    pub ligand: Molecule,
}

/// Wire form of a pair record; one JSON object per line. `bonds` holds only
/// non-None entries with i < j.
#[derive(Serialize, Deserialize)]
struct RawPair {
    id: String,
    protein_features: Vec<f64>,
    atoms: Vec<u8>,
    bonds: Vec<(usize, usize, u8)>,
}

/// Parses one JSONL pair record. Bonds are mirrored onto both orientations;
/// unlisted pairs stay None.
pub fn parse_pair_record(line: &str) -> Result<PairRecord, MolError> {
    let raw: RawPair = serde_json::from_str(line)
        .map_err(|e| MolError::Parse { line: None, msg: e.to_string() })?;
    let n = raw.atoms.len();
    if let Some(&t) = raw.atoms.iter().find(|&&t| t as usize >= ATOM_TYPE_COUNT) {
        return Err(MolError::Parse { line: None, msg: format!("atom type {} out of range", t) });
    }
    let mut ligand = Molecule::empty(n);
    for (i, &t) in raw.atoms.iter().enumerate() {
        ligand.set_atom(i, t);
    }
    for &(i, j, t) in &raw.bonds {
        if i >= j {
            return Err(MolError::Parse {
                line: None,
                msg: format!("bond ({}, {}) must be listed with i < j", i, j),
            });
        }
        if j >= n {
            return Err(MolError::Parse {
                line: None,
                msg: format!("bond ({}, {}) out of range for {} atoms", i, j, n),
            });
        }
        if t == NONE_BOND || t as usize >= BOND_TYPE_COUNT {
            return Err(MolError::Parse {
                line: None,
                msg: format!("bond ({}, {}) has invalid type {}", i, j, t),
            });
        }
        if ligand.bond_type(i, j) != NONE_BOND {
            return Err(MolError::Parse { line: None, msg: format!("duplicate bond ({}, {})", i, j) });
        }
        ligand.set_bond(i, j, t);
    }
    let protein = ProteinRecord::new(raw.id, raw.protein_features)?;
    Ok(PairRecord { protein, ligand })
}

/// Serializes to the canonical single-line JSON form.
pub fn serialize_pair_record(rec: &PairRecord) -> String {
    let n = rec.ligand.n();
    let mut bonds = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let t = rec.ligand.bond_type(i, j);
            if t != NONE_BOND {
                bonds.push((i, j, t));
            }
        }
    }
    let raw = RawPair {
        id: rec.protein.id.clone(),
        protein_features: rec.protein.features.clone(),
        atoms: rec.ligand.atom_types().to_vec(),
        bonds,
    };
    serde_json::to_string(&raw).expect("pair record serializes")
}

fn at_line(e: MolError, line: usize) -> MolError {
    match e {
        MolError::Parse { msg, .. } => MolError::Parse { line: Some(line), msg },
        other => other,
    }
}

/// Loads a JSONL dataset, checking every ligand against the full molecule
/// invariant set and requiring a consistent atom-slot count.
pub fn load_dataset(path: &Path) -> Result<Vec<PairRecord>, MolError> {
    let text = fs::read_to_string(path)?;
    let mut records = Vec::new();
    let mut expected_n = None;
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec = parse_pair_record(line).map_err(|e| at_line(e, lineno))?;
        let report = rec.ligand.validity_report();
        if !report.is_valid() {
            return Err(MolError::Parse {
                line: Some(lineno),
                msg: format!("ligand violates molecule invariants: {}", report),
            });
        }
        match expected_n {
            None => expected_n = Some(rec.ligand.n()),
            Some(n) if n != rec.ligand.n() => {
                return Err(MolError::Parse {
                    line: Some(lineno),
                    msg: format!("atom slot count {} differs from {}", rec.ligand.n(), n),
                });
            }
            _ => {}
        }
        records.push(rec);
    }
    Ok(records)
}

pub fn write_dataset(path: &Path, records: &[PairRecord]) -> Result<(), MolError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    for rec in records {
        writeln!(w, "{}", serialize_pair_record(rec))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use super::super::vocab::EMPTY_ATOM;

    fn uniform_protein(id: &str) -> Vec<f64> {
        let mut f = vec![1.0 / 20.0; 20];
        f.push(0.25);
        let _ = id;
        f
    }

    #[test]
    fn all_empty_record_parses() {
        let line = format!(
            r#"{{"id":"p0","protein_features":{:?},"atoms":[6,6,6],"bonds":[]}}"#,
            uniform_protein("p0")
        );
        let rec = parse_pair_record(&line).unwrap();
        assert_eq!(rec.ligand.heavy_atom_count(), 0);
        assert!(rec.ligand.atom_types().iter().all(|&t| t == EMPTY_ATOM));
    }

    #[test]
    fn bonds_are_mirrored() {
        let line = format!(
            r#"{{"id":"p1","protein_features":{:?},"atoms":[0,0],"bonds":[[0,1,1]]}}"#,
            uniform_protein("p1")
        );
        let rec = parse_pair_record(&line).unwrap();
        assert_eq!(rec.ligand.bond_type(0, 1), 1);
        assert_eq!(rec.ligand.bond_type(1, 0), 1);
    }

    #[test]
    fn duplicate_bond_is_a_parse_error() {
        let line = format!(
            r#"{{"id":"p2","protein_features":{:?},"atoms":[0,0],"bonds":[[0,1,1],[0,1,2]]}}"#,
            uniform_protein("p2")
        );
        assert!(parse_pair_record(&line).is_err());
    }

    #[test]
    fn malformed_json_is_a_parse_error() {
        assert!(parse_pair_record("{not json").is_err());
    }

    #[test]
    fn out_of_range_bond_index_is_rejected() {
        let line = format!(
            r#"{{"id":"p3","protein_features":{:?},"atoms":[0,0],"bonds":[[0,5,1]]}}"#,
            uniform_protein("p3")
        );
        assert!(parse_pair_record(&line).is_err());
    }

    #[test]
    fn parse_serialize_parse_roundtrips() {
        let line = format!(
            r#"{{"id":"p4","protein_features":{:?},"atoms":[0,2,1,6],"bonds":[[0,1,2],[1,2,1]]}}"#,
            uniform_protein("p4")
        );
        let rec1 = parse_pair_record(&line).unwrap();
        let serialized = serialize_pair_record(&rec1);
        let rec2 = parse_pair_record(&serialized).unwrap();
        assert_eq!(rec1, rec2);
        assert_eq!(serialized, serialize_pair_record(&rec2));
    }
}
