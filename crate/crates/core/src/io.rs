//! CSV formats for matrices, policies, and preference datasets.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::game::{Policy, PreferenceMatrix, ResponseSpace};
use crate::oracle::{PreferenceDataset, PreferencePair};

/// Reads a preference matrix: a header row of response ids followed by `m`
/// rows of `m` probabilities.
pub fn read_matrix_csv<R: Read>(reader: R) -> Result<(ResponseSpace, PreferenceMatrix)> {
    let mut csv = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let ids: Vec<String> = csv.headers()?.iter().map(str::to_owned).collect();
    let space = ResponseSpace::new(ids)?;
    let m = space.len();
    let mut rows = Vec::with_capacity(m);
    for (i, record) in csv.records().enumerate() {
        let record = record?;
        if record.len() != m {
            return Err(Error::InvalidMatrix {
                row: i,
                col: record.len().min(m),
                reason: format!("row has {} entries, expected {m}", record.len()),
            });
        }
        let row = record
            .iter()
            .enumerate()
            .map(|(j, field)| {
                field.parse::<f64>().map_err(|_| Error::InvalidMatrix {
                    row: i,
                    col: j,
                    reason: format!("`{field}` is not a number"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    if rows.len() != m {
        return Err(Error::InvalidMatrix {
            row: rows.len(),
            col: 0,
            reason: format!("found {} rows, expected {m}", rows.len()),
        });
    }
    Ok((space, PreferenceMatrix::new(rows)?))
}

pub fn load_matrix(path: &Path) -> Result<(ResponseSpace, PreferenceMatrix)> {
    read_matrix_csv(std::fs::File::open(path)?)
}

pub fn write_matrix_csv<W: Write>(
    space: &ResponseSpace,
    matrix: &PreferenceMatrix,
    writer: W,
) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    csv.write_record(space.ids())?;
    for row in matrix.rows() {
        csv.write_record(row.iter().map(|p| p.to_string()))?;
    }
    csv.flush()?;
    Ok(())
}

/// `response_id,probability` rows.
pub fn write_policy_csv<W: Write>(space: &ResponseSpace, policy: &Policy, writer: W) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    csv.write_record(["response_id", "probability"])?;
    for (id, p) in space.ids().iter().zip(policy.probs()) {
        csv.write_record([id.as_str(), &p.to_string()])?;
    }
    csv.flush()?;
    Ok(())
}

/// Reads a policy and orders it to match `space`.
pub fn read_policy_csv<R: Read>(reader: R, space: &ResponseSpace) -> Result<Policy> {
    let mut csv = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut probs = vec![f64::NAN; space.len()];
    for record in csv.records() {
        let record = record?;
        let id = record.get(0).unwrap_or_default();
        let index = space
            .index_of(id)
            .ok_or_else(|| Error::InvalidPolicy(format!("unknown response `{id}`")))?;
        let value = record.get(1).unwrap_or_default();
        probs[index] = value
            .parse()
            .map_err(|_| Error::InvalidPolicy(format!("`{value}` is not a number")))?;
    }
    if let Some(i) = probs.iter().position(|p| p.is_nan()) {
        return Err(Error::InvalidPolicy(format!(
            "missing probability for `{}`",
            space.id(i)
        )));
    }
    Policy::new(probs)
}

/// `iteration,winner,loser` rows with response ids.
pub fn write_dataset_csv<W: Write>(
    space: &ResponseSpace,
    dataset: &PreferenceDataset,
    writer: W,
) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    csv.write_record(["iteration", "winner", "loser"])?;
    for pair in &dataset.pairs {
        csv.write_record([
            pair.iteration.to_string().as_str(),
            space.id(pair.winner),
            space.id(pair.loser),
        ])?;
    }
    csv.flush()?;
    Ok(())
}

pub fn read_dataset_csv<R: Read>(reader: R, space: &ResponseSpace) -> Result<PreferenceDataset> {
    let mut csv = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers: Vec<String> = csv.headers()?.iter().map(str::to_owned).collect();
    if headers != ["iteration", "winner", "loser"] {
        return Err(Error::Collection(format!(
            "expected header `iteration,winner,loser`, got `{}`",
            headers.join(",")
        )));
    }
    let lookup = |id: &str| {
        space
            .index_of(id)
            .ok_or_else(|| Error::Collection(format!("unknown response `{id}`")))
    };
    let mut pairs = Vec::new();
    for record in csv.records() {
        let record = record?;
        let iteration = record[0]
            .parse()
            .map_err(|_| Error::Collection(format!("bad iteration `{}`", &record[0])))?;
        let winner = lookup(&record[1])?;
        let loser = lookup(&record[2])?;
        if winner == loser {
            return Err(Error::Collection(format!(
                "pair with identical responses `{}`",
                &record[1]
            )));
        }
        pairs.push(PreferencePair {
            winner,
            loser,
            iteration,
        });
    }
    Ok(PreferenceDataset::from_pairs(pairs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_round_trip() {
        let text = "a,b,c\n0.5,0.9,0.1\n0.1,0.5,0.9\n0.9,0.1,0.5\n";
        let (space, matrix) = read_matrix_csv(text.as_bytes()).unwrap();
        assert_eq!(space.ids(), ["a", "b", "c"]);
        let mut out = Vec::new();
        write_matrix_csv(&space, &matrix, &mut out).unwrap();
        let (_, back) = read_matrix_csv(out.as_slice()).unwrap();
        assert_eq!(back, matrix);
    }

    #[test]
    fn matrix_errors_name_the_cell() {
        let text = "a,b,c\n0.5,0.9,0.1\n0.1,0.5,0.8\n0.9,0.1,0.5\n";
        match read_matrix_csv(text.as_bytes()) {
            Err(Error::InvalidMatrix { row, col, .. }) => assert_eq!((row, col), (1, 2)),
            other => panic!("{other:?}"),
        }
        let text = "a,b\n0.5,x\n0.5,0.5\n";
        assert!(matches!(
            read_matrix_csv(text.as_bytes()),
            Err(Error::InvalidMatrix { row: 0, col: 1, .. })
        ));
        let text = "a,b\n0.5,0.5\n";
        assert!(read_matrix_csv(text.as_bytes()).is_err());
    }

    #[test]
    fn policy_and_dataset_round_trip() {
        let space = ResponseSpace::indexed(3).unwrap();
        let policy = Policy::new(vec![0.25, 0.5, 0.25]).unwrap();
        let mut out = Vec::new();
        write_policy_csv(&space, &policy, &mut out).unwrap();
        assert!(String::from_utf8(out.clone()).unwrap().starts_with("response_id,probability\n"));
        assert_eq!(read_policy_csv(out.as_slice(), &space).unwrap(), policy);

        let dataset = PreferenceDataset::from_pairs(vec![
            PreferencePair { winner: 2, loser: 0, iteration: 1 },
            PreferencePair { winner: 1, loser: 2, iteration: 4 },
        ]);
        let mut out = Vec::new();
        write_dataset_csv(&space, &dataset, &mut out).unwrap();
        assert_eq!(
            String::from_utf8(out.clone()).unwrap(),
            "iteration,winner,loser\n1,y2,y0\n4,y1,y2\n"
        );
        assert_eq!(read_dataset_csv(out.as_slice(), &space).unwrap().pairs, dataset.pairs);
        assert!(read_dataset_csv("iteration,winner,loser\n1,y0,y0\n".as_bytes(), &space).is_err());
    }
}
