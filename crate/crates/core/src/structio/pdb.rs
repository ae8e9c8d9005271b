//! Fixed-column PDB `ATOM` records.
//!
//! Only the first model is read. `HETATM` records, hydrogens and alternate
//! locations other than blank/`A` are dropped. Insertion codes are folded
//! into the residue index: every residue carrying an insertion code shifts
//! the numbering of all following residues in its chain by one.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::BufRead;
use std::path::Path;

use super::{Atom, Chain, ComplexStructure, Residue, StructureError, Vec3};

fn field(line: &str, start: usize, end: usize) -> &str {
    let end = end.min(line.len());
    if start >= end {
        return "";
    }
    line.get(start..end).unwrap_or("").trim()
}

fn parse_error(line: usize, message: impl Into<String>) -> StructureError {
    StructureError::Parse {
        line,
        message: message.into(),
    }
}

fn element_from_name(name: &str) -> String {
    name.chars()
        .find(|c| c.is_ascii_alphabetic())
        .map(|c| c.to_ascii_uppercase().to_string())
        .unwrap_or_default()
}

fn is_hydrogen(element: &str) -> bool {
    matches!(element, "H" | "D")
}

#[derive(Default)]
struct ChainState {
    slot: usize,
    last_key: Option<(i32, char)>,
    offset: i32,
}

pub fn parse_pdb<R: BufRead>(reader: R) -> Result<ComplexStructure, StructureError> {
    let mut structure = ComplexStructure::default();
    let mut chains: HashMap<String, ChainState> = HashMap::new();

    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        let record = line.get(..6).unwrap_or(line.as_str());
        if record.starts_with("ENDMDL") || record.trim_end() == "END" {
            break;
        }
        if record != "ATOM  " {
            continue;
        }
        if line.len() < 54 {
            return Err(parse_error(lineno, "ATOM record shorter than 54 columns"));
        }

        let altloc = line.as_bytes()[16] as char;
        if altloc != ' ' && altloc != 'A' {
            continue;
        }
        let name = field(&line, 12, 16);
        if name.is_empty() {
            return Err(parse_error(lineno, "empty atom name"));
        }
        let mut element = field(&line, 76, 78).to_ascii_uppercase();
        if element.is_empty() {
            element = element_from_name(name);
        }
        if is_hydrogen(&element) {
            continue;
        }

        let coord = |start: usize, end: usize, axis: &str| -> Result<f64, StructureError> {
            let text = field(&line, start, end);
            match text.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(parse_error(lineno, format!("invalid {axis} coordinate {text:?}"))),
            }
        };
        let xyz = Vec3::new(coord(30, 38, "x")?, coord(38, 46, "y")?, coord(46, 54, "z")?);

        let serial_text = field(&line, 6, 11);
        let serial = serial_text
            .parse::<u32>()
            .map_err(|_| parse_error(lineno, format!("invalid serial {serial_text:?}")))?;
        let res_name = field(&line, 17, 20).to_string();
        let chain_id = field(&line, 21, 22).to_string();
        let seq_text = field(&line, 22, 26);
        let res_seq = seq_text
            .parse::<i32>()
            .map_err(|_| parse_error(lineno, format!("invalid residue number {seq_text:?}")))?;
        let icode = line.as_bytes().get(26).map(|&b| b as char).unwrap_or(' ');

        let state = chains.entry(chain_id.clone()).or_insert_with(|| {
            structure.chains.push(Chain {
                id: chain_id.clone(),
                residues: Vec::new(),
            });
            ChainState {
                slot: structure.chains.len() - 1,
                ..Default::default()
            }
        });
        let chain = &mut structure.chains[state.slot];

        let key = (res_seq, icode);
        if state.last_key != Some(key) {
            if icode != ' ' {
                state.offset += 1;
            }
            let index = res_seq + state.offset;
            if let Some(prev) = chain.residues.last() {
                if index <= prev.index {
                    return Err(parse_error(
                        lineno,
                        format!(
                            "residue number {res_seq}{} does not increase within chain {chain_id:?}",
                            icode.to_string().trim()
                        ),
                    ));
                }
            }
            chain.residues.push(Residue {
                index,
                name: res_name,
                atoms: Vec::new(),
            });
            state.last_key = Some(key);
        }
        let residue = chain.residues.last_mut().expect("residue pushed above");
        if residue.atoms.iter().any(|a| a.name == name) {
            continue;
        }
        residue.atoms.push(Atom {
            name: name.to_string(),
            element,
            coord: xyz,
            residue_index: residue.index,
            chain_id: chain_id.clone(),
            serial,
        });
    }

    if structure.atom_count() == 0 {
        return Err(StructureError::Empty);
    }
    Ok(structure)
}

pub fn parse_pdb_file(path: impl AsRef<Path>) -> Result<ComplexStructure, StructureError> {
    let file = std::fs::File::open(path)?;
    parse_pdb(std::io::BufReader::new(file))
}

fn coord_field(value: f64) -> Result<String, StructureError> {
    let text = format!("{value:8.3}");
    if value.abs() >= 10000.0 || text.len() > 8 || !value.is_finite() {
        return Err(StructureError::FormatOverflow(format!("coordinate {value:.3}")));
    }
    Ok(text)
}

fn name_field(name: &str, element: &str) -> String {
    if name.len() >= 4 || element.len() == 2 {
        format!("{name:<4}")
    } else {
        format!(" {name:<3}")
    }
}

/// Renders `structure` as PDB text. `coords`, when given, replaces the
/// coordinates atom by atom in flat order.
pub fn write_pdb(
    structure: &ComplexStructure,
    coords: Option<&[Vec3]>,
) -> Result<String, StructureError> {
    let n = structure.atom_count();
    if let Some(c) = coords {
        if c.len() != n {
            return Err(StructureError::OverrideShape {
                expected: n,
                got: c.len(),
            });
        }
    }

    let mut out = String::with_capacity(81 * (n + structure.chains.len() + 1));
    let mut serial = 1u32;
    let mut flat = 0usize;
    for chain in &structure.chains {
        let chain_char = chain.id.chars().next().unwrap_or(' ');
        let mut last: Option<&Residue> = None;
        for residue in &chain.residues {
            if !(-999..=9999).contains(&residue.index) {
                return Err(StructureError::FormatOverflow(format!(
                    "residue number {}",
                    residue.index
                )));
            }
            for atom in &residue.atoms {
                let xyz = coords.map_or(atom.coord, |c| c[flat]);
                flat += 1;
                writeln!(
                    out,
                    "ATOM  {:>5} {}{:1}{:>3} {}{:>4}    {}{}{}{:>6.2}{:>6.2}          {:>2}",
                    serial % 100_000,
                    name_field(&atom.name, &atom.element),
                    ' ',
                    residue.name,
                    chain_char,
                    residue.index,
                    coord_field(xyz.x)?,
                    coord_field(xyz.y)?,
                    coord_field(xyz.z)?,
                    1.0,
                    0.0,
                    atom.element,
                )
                .expect("writing to a String cannot fail");
                serial += 1;
            }
            last = Some(residue);
        }
        if let Some(residue) = last {
            writeln!(
                out,
                "TER   {:>5}      {:>3} {}{:>4}",
                serial % 100_000,
                residue.name,
                chain_char,
                residue.index
            )
            .expect("writing to a String cannot fail");
            serial += 1;
        }
    }
    out.push_str("END\n");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const TWO_RESIDUES: &str = "\
ATOM      1  N   MET A   1      11.104   6.134  -6.504  1.00  0.00           N
ATOM      2  CA  MET A   1      11.639   6.071  -5.147  1.00  0.00           C
ATOM      3  H   MET A   1      10.104   6.134  -6.504  1.00  0.00           H
HETATM    4  O   HOH A 101       1.000   1.000   1.000  1.00  0.00           O
ATOM      5  N   GLY B   2       1.000   2.000   3.000  1.00  0.00           N
";

    #[test]
    fn single_atom_record() {
        let text = "ATOM      1  CA  MET A   1      11.639   6.071  -5.147  1.00  0.00           C\n";
        let s = parse_pdb(text.as_bytes()).unwrap();
        assert_eq!(s.chains.len(), 1);
        assert_eq!(s.residue_count(), 1);
        assert_eq!(s.atom_count(), 1);
        let atom = s.atoms().next().unwrap();
        assert_eq!(atom.name, "CA");
        assert_eq!(atom.element, "C");
        assert_eq!(atom.chain_id, "A");
        assert_eq!(atom.coord, Vec3::new(11.639, 6.071, -5.147));
    }

    #[test]
    fn drops_hetatm_and_hydrogens() {
        let s = parse_pdb(TWO_RESIDUES.as_bytes()).unwrap();
        assert_eq!(s.atom_count(), 3);
        assert_eq!(s.chains.len(), 2);
    }

    #[test]
    fn keeps_first_model_only() {
        let text = "\
MODEL        1
ATOM      1  CA  MET A   1      11.639   6.071  -5.147  1.00  0.00           C
ENDMDL
MODEL        2
ATOM      1  CA  MET A   1      12.639   6.071  -5.147  1.00  0.00           C
ATOM      2  CB  MET A   1      12.639   7.071  -5.147  1.00  0.00           C
ENDMDL
";
        let s = parse_pdb(text.as_bytes()).unwrap();
        assert_eq!(s.atom_count(), 1);
        assert_eq!(s.atoms().next().unwrap().coord.x, 11.639);
    }

    #[test]
    fn alternate_location_duplicate_dropped() {
        let text = "\
ATOM      1  CA AMET A   1      11.639   6.071  -5.147  0.50  0.00           C
ATOM      2  CA BMET A   1      11.939   6.071  -5.147  0.50  0.00           C
";
        let s = parse_pdb(text.as_bytes()).unwrap();
        assert_eq!(s.atom_count(), 1);
        assert_eq!(s.atoms().next().unwrap().coord.x, 11.639);
    }

    #[test]
    fn insertion_codes_fold_into_index() {
        let text = "\
ATOM      1  CA  GLY A  52       0.000   0.000   0.000  1.00  0.00           C
ATOM      2  CA  GLY A  52A      1.000   0.000   0.000  1.00  0.00           C
ATOM      3  CA  GLY A  53       2.000   0.000   0.000  1.00  0.00           C
";
        let s = parse_pdb(text.as_bytes()).unwrap();
        let idx: Vec<i32> = s.chains[0].residues.iter().map(|r| r.index).collect();
        assert_eq!(idx, vec![52, 53, 54]);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "\
ATOM      1  CA  GLY A  52       0.000   0.000   0.000  1.00  0.00           C
ATOM      2  CA  GLY A  53       abc     0.000   0.000  1.00  0.00           C
";
        match parse_pdb(text.as_bytes()) {
            Err(StructureError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(matches!(
            parse_pdb("ATOM      1  CA  GLY A  52  \n".as_bytes()),
            Err(StructureError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn empty_after_filtering() {
        let text = "HETATM    4  O   HOH A 101       1.000   1.000   1.000  1.00  0.00           O\n";
        assert!(matches!(parse_pdb(text.as_bytes()), Err(StructureError::Empty)));
    }

    #[test]
    fn three_atom_fixture_is_byte_exact() {
        let s = parse_pdb(
            "\
ATOM      1  N   ALA A   1      -1.000   2.500   0.000  1.00  0.00           N
ATOM      2  CA  ALA A   1       0.000   0.000   0.000  1.00  0.00           C
ATOM      3  OG1 THR B   7    1234.567-999.999  12.345  1.00  0.00           O
"
            .as_bytes(),
        )
        .unwrap();
        let expected = "\
ATOM      1  N   ALA A   1      -1.000   2.500   0.000  1.00  0.00           N
ATOM      2  CA  ALA A   1       0.000   0.000   0.000  1.00  0.00           C
TER       3      ALA A   1
ATOM      4  OG1 THR B   7    1234.567-999.999  12.345  1.00  0.00           O
TER       5      THR B   7
END
";
        assert_eq!(write_pdb(&s, None).unwrap(), expected);
    }

    #[test]
    fn zero_override_writes_zero_fields() {
        let s = parse_pdb(TWO_RESIDUES.as_bytes()).unwrap();
        let zeros = vec![Vec3::zeros(); s.atom_count()];
        let text = write_pdb(&s, Some(&zeros)).unwrap();
        for line in text.lines().filter(|l| l.starts_with("ATOM")) {
            assert_eq!(&line[30..54], "   0.000   0.000   0.000");
        }
    }

    #[test]
    fn override_shape_checked() {
        let s = parse_pdb(TWO_RESIDUES.as_bytes()).unwrap();
        assert!(matches!(
            write_pdb(&s, Some(&[Vec3::zeros()])),
            Err(StructureError::OverrideShape { expected: 3, got: 1 })
        ));
    }

    #[test]
    fn large_coordinates_overflow() {
        let mut s = parse_pdb(TWO_RESIDUES.as_bytes()).unwrap();
        s.chains[0].residues[0].atoms[0].coord.x = 10000.0;
        assert!(matches!(write_pdb(&s, None), Err(StructureError::FormatOverflow(_))));
        s.chains[0].residues[0].atoms[0].coord.x = -1000.5;
        assert!(matches!(write_pdb(&s, None), Err(StructureError::FormatOverflow(_))));
    }

    proptest! {
        #[test]
        fn write_then_parse_round_trips(
            coords in proptest::collection::vec((-999.0f64..9999.0, -999.0f64..9999.0, -999.0f64..9999.0), 1..40)
        ) {
            let names = ["N", "CA", "C", "O", "CB", "OXT", "NH1"];
            let mut text = String::new();
            for (i, (x, y, z)) in coords.iter().enumerate() {
                let chain = if i < coords.len() / 2 { 'A' } else { 'B' };
                let line = format!(
                    "ATOM  {:>5} {}{:>4} {}{:>4}    {:8.3}{:8.3}{:8.3}  1.00  0.00           {}\n",
                    i + 1,
                    name_field(names[i % names.len()], "C"),
                    "LYS",
                    chain,
                    i / names.len() + 1,
                    x, y, z,
                    &names[i % names.len()][..1],
                );
                text.push_str(&line);
            }
            let parsed = parse_pdb(text.as_bytes()).unwrap();
            let again = parse_pdb(write_pdb(&parsed, None).unwrap().as_bytes()).unwrap();
            prop_assert_eq!(parsed.atom_count(), again.atom_count());
            for (a, b) in parsed.atoms().zip(again.atoms()) {
                prop_assert_eq!(&a.name, &b.name);
                prop_assert_eq!(&a.chain_id, &b.chain_id);
                prop_assert_eq!(a.residue_index, b.residue_index);
                prop_assert!((a.coord - b.coord).amax() < 5e-4);
            }
            for ((_, r1), (_, r2)) in parsed.residues().zip(again.residues()) {
                prop_assert_eq!(&r1.name, &r2.name);
            }
        }
    }
}
