//! Parser for the standard graph-classification benchmark text layout:
//! `NAME_A.txt` (1-indexed edge list), `NAME_graph_indicator.txt` (node to
//! graph id), `NAME_graph_labels.txt`, optional `NAME_node_labels.txt`.

use std::collections::BTreeSet;
use std::path::Path;

use super::{Dataset, GraphSample};
use crate::error::{Error, Result};

pub fn parse_benchmark_dataset(dir: &Path, name: &str) -> Result<Dataset> {
    let indicator = read_int_lines(dir, &format!("{name}_graph_indicator.txt"))?;
    let graph_labels_raw = read_int_lines(dir, &format!("{name}_graph_labels.txt"))?;
    let node_labels_raw = {
        let path = dir.join(format!("{name}_node_labels.txt"));
        if path.exists() {
            Some(read_int_lines(dir, &format!("{name}_node_labels.txt"))?)
        } else {
            None
        }
    };

    let num_graphs = graph_labels_raw.len();
    if num_graphs == 0 {
        return Err(Error::EmptyInput {
            op: "parse_benchmark_dataset",
        });
    }

    // nodes are 1-indexed globally; map each to (graph, local index)
    let mut node_graph = Vec::with_capacity(indicator.len());
    let mut graph_sizes = vec![0usize; num_graphs];
    for (line_no, &g) in indicator.iter().enumerate() {
        if g < 1 || g as usize > num_graphs {
            return Err(Error::Format {
                file: format!("{name}_graph_indicator.txt"),
                line: line_no + 1,
                msg: format!("graph id {g} out of range 1..={num_graphs}"),
            });
        }
        let gi = g as usize - 1;
        node_graph.push((gi, graph_sizes[gi]));
        graph_sizes[gi] += 1;
    }
    if let Some(labels) = &node_labels_raw {
        if labels.len() != node_graph.len() {
            return Err(Error::Format {
                file: format!("{name}_node_labels.txt"),
                line: labels.len(),
                msg: format!(
                    "{} node labels for {} nodes",
                    labels.len(),
                    node_graph.len()
                ),
            });
        }
    }

    // one-hot vocabulary over distinct node labels, sorted for determinism
    let label_vocab: Vec<i64> = match &node_labels_raw {
        Some(labels) => labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect(),
        None => Vec::new(),
    };
    let feature_dim = if label_vocab.is_empty() { 1 } else { label_vocab.len() };

    let mut edges_per_graph: Vec<Vec<(u32, u32)>> = vec![Vec::new(); num_graphs];
    let edge_file = format!("{name}_A.txt");
    for (line_no, line) in read_lines(dir, &edge_file)?.iter().enumerate() {
        let (a, b) = parse_edge(line).ok_or_else(|| Error::Format {
            file: edge_file.clone(),
            line: line_no + 1,
            msg: format!("expected `i, j`, got `{line}`"),
        })?;
        let bounds = |v: i64| -> Result<usize> {
            if v < 1 || v as usize > node_graph.len() {
                Err(Error::Format {
                    file: edge_file.clone(),
                    line: line_no + 1,
                    msg: format!("node {v} out of range 1..={}", node_graph.len()),
                })
            } else {
                Ok(v as usize - 1)
            }
        };
        let (ga, la) = node_graph[bounds(a)?];
        let (gb, lb) = node_graph[bounds(b)?];
        if ga != gb {
            return Err(Error::Format {
                file: edge_file.clone(),
                line: line_no + 1,
                msg: format!("edge ({a}, {b}) crosses graphs {} and {}", ga + 1, gb + 1),
            });
        }
        if la != lb {
            // self loops dropped, anything else kept; GraphSample::new
            // symmetrizes and dedups
            edges_per_graph[ga].push((la as u32, lb as u32));
        }
    }

    // graph labels remapped onto contiguous [0, c)
    let class_vocab: Vec<i64> = graph_labels_raw
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let num_classes = class_vocab.len();
    if num_classes < 2 {
        return Err(Error::invalid(format!(
            "dataset {name} has {num_classes} distinct class labels; need at least 2"
        )));
    }

    let mut node_cursor = 0usize;
    let mut samples = Vec::with_capacity(num_graphs);
    for g in 0..num_graphs {
        let n = graph_sizes[g];
        if n == 0 {
            return Err(Error::Format {
                file: format!("{name}_graph_indicator.txt"),
                line: 0,
                msg: format!("graph {} has no nodes", g + 1),
            });
        }
        let mut features = vec![0.0; n * feature_dim];
        if let Some(labels) = &node_labels_raw {
            for i in 0..n {
                let raw = labels[node_cursor + i];
                let slot = label_vocab.binary_search(&raw).expect("vocab covers labels");
                features[i * feature_dim + slot] = 1.0;
            }
        } else {
            for i in 0..n {
                features[i * feature_dim] = 1.0;
            }
        }
        node_cursor += n;
        let label = class_vocab
            .binary_search(&graph_labels_raw[g])
            .expect("vocab covers labels");
        samples.push(GraphSample::new(
            g as u64,
            n,
            std::mem::take(&mut edges_per_graph[g]),
            features,
            feature_dim,
            label,
        )?);
    }

    let ds = Dataset {
        name: name.to_string(),
        num_classes,
        feature_dim,
        samples,
    };
    ds.validate()?;
    Ok(ds)
}

fn parse_edge(line: &str) -> Option<(i64, i64)> {
    let mut parts = line.split(',');
    let a = parts.next()?.trim().parse().ok()?;
    let b = parts.next()?.trim().parse().ok()?;
    if parts.next().is_some() {
        return None;
    }
    Some((a, b))
}

fn read_lines(dir: &Path, file: &str) -> Result<Vec<String>> {
    let path = dir.join(file);
    if !path.exists() {
        return Err(Error::MissingFile { path });
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(text
        .lines()
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .collect())
}

fn read_int_lines(dir: &Path, file: &str) -> Result<Vec<i64>> {
    read_lines(dir, file)?
        .iter()
        .enumerate()
        .map(|(i, l)| {
            l.parse().map_err(|_| Error::Format {
                file: file.to_string(),
                line: i + 1,
                msg: format!("expected an integer, got `{l}`"),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_fixture(dir: &Path, name: &str, files: &[(&str, &str)]) {
        for (suffix, contents) in files {
            std::fs::write(dir.join(format!("{name}_{suffix}")), contents).unwrap();
        }
    }

    /// Two graphs: a triangle (nodes 1-3) and a single edge (nodes 4-5).
    fn toy_dir() -> tempfile::TempDir {
        let tmp = tempfile::tempdir().unwrap();
        write_fixture(
            tmp.path(),
            "toy",
            &[
                (
                    "A.txt",
                    "1, 2\n2, 1\n2, 3\n3, 2\n1, 3\n3, 1\n4, 5\n5, 4\n",
                ),
                ("graph_indicator.txt", "1\n1\n1\n2\n2\n"),
                ("graph_labels.txt", "3\n7\n"),
                ("node_labels.txt", "0\n1\n0\n1\n1\n"),
            ],
        );
        tmp
    }

    #[test]
    fn parses_two_graph_fixture() {
        let tmp = toy_dir();
        let ds = parse_benchmark_dataset(tmp.path(), "toy").unwrap();
        assert_eq!(ds.samples.len(), 2);
        assert_eq!(ds.num_classes, 2);
        let g0 = &ds.samples[0];
        assert_eq!(g0.num_nodes, 3);
        assert_eq!(g0.edges, vec![(0, 1), (0, 2), (1, 2)]);
        let g1 = &ds.samples[1];
        assert_eq!(g1.num_nodes, 2);
        assert_eq!(g1.edges, vec![(0, 1)]);
    }

    #[test]
    fn remaps_labels_to_contiguous_range() {
        let tmp = toy_dir();
        let ds = parse_benchmark_dataset(tmp.path(), "toy").unwrap();
        assert_eq!(ds.samples[0].label, 0); // raw 3
        assert_eq!(ds.samples[1].label, 1); // raw 7
    }

    #[test]
    fn one_hot_node_labels() {
        let tmp = toy_dir();
        let ds = parse_benchmark_dataset(tmp.path(), "toy").unwrap();
        assert_eq!(ds.feature_dim, 2);
        assert_eq!(ds.samples[0].features, vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn asymmetric_edge_is_symmetrized() {
        let tmp = tempfile::tempdir().unwrap();
        write_fixture(
            tmp.path(),
            "asym",
            &[
                ("A.txt", "1, 2\n3, 4\n4, 3\n"),
                ("graph_indicator.txt", "1\n1\n2\n2\n"),
                ("graph_labels.txt", "1\n2\n"),
            ],
        );
        let ds = parse_benchmark_dataset(tmp.path(), "asym").unwrap();
        assert_eq!(ds.samples[0].edges, vec![(0, 1)]);
        assert_eq!(ds.samples[1].edges, vec![(0, 1)]);
    }

    #[test]
    fn missing_file_is_reported_by_name() {
        let tmp = tempfile::tempdir().unwrap();
        let err = parse_benchmark_dataset(tmp.path(), "nope").unwrap_err();
        assert!(err.to_string().contains("nope_graph_indicator.txt"), "{err}");
    }

    #[test]
    fn cross_graph_edge_is_rejected_with_line() {
        let tmp = tempfile::tempdir().unwrap();
        write_fixture(
            tmp.path(),
            "bad",
            &[
                ("A.txt", "1, 2\n2, 3\n"),
                ("graph_indicator.txt", "1\n1\n2\n"),
                ("graph_labels.txt", "1\n2\n"),
            ],
        );
        let err = parse_benchmark_dataset(tmp.path(), "bad").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bad_A.txt:2"), "{msg}");
    }

    #[test]
    fn self_loops_are_dropped() {
        let tmp = tempfile::tempdir().unwrap();
        write_fixture(
            tmp.path(),
            "loops",
            &[
                ("A.txt", "1, 1\n1, 2\n3, 3\n3, 4\n"),
                ("graph_indicator.txt", "1\n1\n2\n2\n"),
                ("graph_labels.txt", "1\n2\n"),
            ],
        );
        let ds = parse_benchmark_dataset(tmp.path(), "loops").unwrap();
        assert_eq!(ds.samples[0].edges, vec![(0, 1)]);
        assert_eq!(ds.samples[1].edges, vec![(0, 1)]);
    }
}
