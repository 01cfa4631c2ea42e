use super::MonoCorpus;
use crate::error::{Error, Result};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_owned).collect())
}

pub fn write_lines<S: AsRef<str>>(path: &Path, lines: &[S]) -> Result<()> {
    let mut out = String::new();
    for l in lines {
        out.push_str(l.as_ref());
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// One `source<TAB>target` pair per line.
pub fn read_parallel_tsv(path: &Path) -> Result<Vec<(String, String)>> {
    read_lines(path)?
        .into_iter()
        .enumerate()
        .map(|(i, l)| match l.split_once('\t') {
            Some((s, t)) => Ok((s.to_owned(), t.to_owned())),
            None => Err(Error::format("parallel corpus", format!("{}:{}: missing TAB", path.display(), i + 1))),
        })
        .collect()
}

pub fn write_parallel_tsv(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let lines: Vec<String> = pairs.iter().map(|(s, t)| format!("{s}\t{t}")).collect();
    write_lines(path, &lines)
}

fn ranges(lines: &[usize]) -> String {
    let mut out = String::new();
    let mut i = 0;
    while i < lines.len() {
        let start = lines[i];
        let mut end = start;
        while i + 1 < lines.len() && lines[i + 1] == end + 1 {
            i += 1;
            end = lines[i];
        }
        if !out.is_empty() {
            out.push(',');
        }
        if start == end {
            let _ = write!(out, "{start}");
        } else {
            let _ = write!(out, "{start}-{end}");
        }
        i += 1;
    }
    out
}

/// Writes `shard_id<TAB>line ranges` so a split can be replayed without re-shuffling.
pub fn write_shard_manifest(path: &Path, shards: &[MonoCorpus]) -> Result<()> {
    let total: usize = shards.iter().map(MonoCorpus::len).sum();
    let mut lines = vec![format!("#deskmt-shards v1 parts={} total={}", shards.len(), total)];
    for (i, s) in shards.iter().enumerate() {
        lines.push(format!("{}\t{}", s.shard_id.unwrap_or(i), ranges(&s.lines)));
    }
    write_lines(path, &lines)
}

/// Reads a shard manifest back as `(shard_id, line numbers)`.
pub fn read_shard_manifest(path: &Path) -> Result<Vec<(usize, Vec<usize>)>> {
    let bad = |d: String| Error::format("shard manifest", d);
    let lines = read_lines(path)?;
    let Some(header) = lines.first().filter(|h| h.starts_with("#deskmt-shards v1")) else {
        return Err(bad("missing header".into()));
    };
    let _ = header;
    let mut out = Vec::new();
    for l in &lines[1..] {
        let (id, spec) = l.split_once('\t').ok_or_else(|| bad(format!("bad line `{l}`")))?;
        let id: usize = id.parse().map_err(|_| bad(format!("bad shard id `{id}`")))?;
        let mut members = Vec::new();
        for part in spec.split(',').filter(|p| !p.is_empty()) {
            let (a, b) = part.split_once('-').unwrap_or((part, part));
            let a: usize = a.parse().map_err(|_| bad(format!("bad range `{part}`")))?;
            let b: usize = b.parse().map_err(|_| bad(format!("bad range `{part}`")))?;
            members.extend(a..=b);
        }
        out.push((id, members));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::split_disjoint;

    #[test]
    fn manifest_replays_split() {
        let dir = tempfile::tempdir().unwrap();
        let m = MonoCorpus::new("x", (0..37).map(|i| vec![i]).collect());
        let parts = split_disjoint(&m, 4, 12).unwrap();
        let p = dir.path().join("shards.txt");
        write_shard_manifest(&p, &parts).unwrap();
        let back = read_shard_manifest(&p).unwrap();
        for (part, (id, lines)) in parts.iter().zip(back) {
            assert_eq!(part.shard_id, Some(id));
            assert_eq!(part.lines, lines);
        }
    }

    #[test]
    fn range_compression() {
        assert_eq!(ranges(&[0, 1, 2, 5, 7, 8]), "0-2,5,7-8");
        assert_eq!(ranges(&[]), "");
    }
}
