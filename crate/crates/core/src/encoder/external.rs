//! Adapter for a pretrained masked language model running in a child process.
//!
//! The child speaks JSON lines over stdio. On start it prints
//! `{"dim": D, "max_len": L}`. Each request is
//! `{"words": [...], "mask": [word positions]}`; the child masks every piece
//! of those words, encodes, and answers
//! `{"pieces": [[f32; D], ...], "word_ids": [null | word index, ...]}`.
//! Pieces are averaged back to one vector per word, so masking and pooling
//! stay word-level regardless of the child's tokenizer.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{check_positions, ContextEncoder};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Deserialize)]
struct Hello {
    dim: usize,
    max_len: usize,
}

#[derive(Serialize)]
struct Request<'a> {
    words: &'a [String],
    mask: &'a [usize],
}

#[derive(Deserialize)]
struct Response {
    pieces: Vec<Vec<f64>>,
    word_ids: Vec<Option<usize>>,
}

struct ChildIo {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

pub struct ExternalEncoder {
    dim: usize,
    max_len: usize,
    io: Mutex<ChildIo>,
}

impl ExternalEncoder {
    /// Starts `program` with `args` and reads its greeting.
    pub fn spawn(program: &str, args: &[String]) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::External(format!("cannot start `{program}`: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let mut stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        let mut line = String::new();
        stdout
            .read_line(&mut line)
            .map_err(|e| Error::External(format!("reading greeting: {e}")))?;
        let hello: Hello =
            serde_json::from_str(&line).map_err(|e| Error::External(format!("bad greeting `{}`: {e}", line.trim())))?;
        Ok(ExternalEncoder {
            dim: hello.dim,
            max_len: hello.max_len,
            io: Mutex::new(ChildIo { child, stdin, stdout }),
        })
    }

    fn request(&self, words: &[String], mask: &[usize]) -> Result<Response> {
        let mut io = self.io.lock().map_err(|_| Error::External("encoder lock poisoned".into()))?;
        let mut msg = serde_json::to_string(&Request { words, mask })?;
        msg.push('\n');
        io.stdin
            .write_all(msg.as_bytes())
            .and_then(|_| io.stdin.flush())
            .map_err(|e| Error::External(format!("writing request: {e}")))?;
        let mut line = String::new();
        let n = io
            .stdout
            .read_line(&mut line)
            .map_err(|e| Error::External(format!("reading response: {e}")))?;
        if n == 0 {
            return Err(Error::External("child closed its output".into()));
        }
        serde_json::from_str(&line).map_err(|e| Error::External(format!("bad response: {e}")))
    }
}

impl Drop for ExternalEncoder {
    fn drop(&mut self) {
        if let Ok(io) = self.io.get_mut() {
            let _ = io.child.kill();
            let _ = io.child.wait();
        }
    }
}

/// Averages sub-word vectors into word vectors. Pieces with no word id
/// (special tokens) are skipped; every word must own at least one piece.
pub fn aggregate_word_pieces<S: Scalar>(
    pieces: &Array2<S>,
    word_ids: &[Option<usize>],
    n_words: usize,
) -> Result<Array2<S>> {
    if pieces.nrows() != word_ids.len() {
        return Err(Error::LengthMismatch {
            expected: pieces.nrows(),
            actual: word_ids.len(),
        });
    }
    let mut out = Array2::<S>::zeros((n_words, pieces.ncols()));
    let mut counts = vec![0usize; n_words];
    for (row, id) in pieces.rows().into_iter().zip(word_ids) {
        let Some(w) = *id else { continue };
        if w >= n_words {
            return Err(Error::OutOfRange {
                position: w,
                len: n_words,
            });
        }
        out.row_mut(w).scaled_add(S::one(), &row);
        counts[w] += 1;
    }
    for (w, &c) in counts.iter().enumerate() {
        if c == 0 {
            return Err(Error::External(format!("word {w} has no sub-word pieces")));
        }
        out.row_mut(w).mapv_inplace(|v| v / S::lit(c as f64));
    }
    Ok(out)
}

impl<S: Scalar> ContextEncoder<S> for ExternalEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn max_len(&self) -> usize {
        self.max_len
    }

    fn encode_masked(&self, tokens: &[String], masked: &[usize]) -> Result<Array2<S>> {
        check_positions(masked, tokens.len())?;
        let resp = self.request(tokens, masked)?;
        let rows = resp.pieces.len();
        let mut pieces = Array2::<S>::zeros((rows, self.dim));
        for (i, v) in resp.pieces.iter().enumerate() {
            if v.len() != self.dim {
                return Err(Error::LengthMismatch {
                    expected: self.dim,
                    actual: v.len(),
                });
            }
            for (j, &x) in v.iter().enumerate() {
                pieces[[i, j]] = S::lit(x);
            }
        }
        aggregate_word_pieces(&pieces, &resp.word_ids, tokens.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn pieces_average_to_words() {
        let pieces = array![[9.0f64, 9.0], [1.0, 0.0], [3.0, 2.0], [0.0, 4.0], [9.0, 9.0]];
        let ids = [None, Some(0), Some(0), Some(1), None];
        let words = aggregate_word_pieces(&pieces, &ids, 2).unwrap();
        assert_eq!(words, array![[2.0, 1.0], [0.0, 4.0]]);
    }

    #[test]
    fn word_without_pieces_is_error() {
        let pieces = array![[1.0f64, 0.0]];
        assert!(aggregate_word_pieces(&pieces, &[Some(0)], 2).is_err());
        assert!(aggregate_word_pieces(&pieces, &[Some(3)], 2).is_err());
    }

    /// Drives a shell-script child that splits each word into two pieces and
    /// encodes a piece as `[word index, masked flag]`.
    #[test]
    fn child_process_protocol() {
        if Command::new("python3").arg("--version").output().is_err() {
            eprintln!("python3 not available; skipping");
            return;
        }
        let script = r#"
import json, sys
print(json.dumps({"dim": 2, "max_len": 16}), flush=True)
for line in sys.stdin:
    req = json.loads(line)
    pieces, ids = [[0.0, 0.0]], [None]
    for i, _ in enumerate(req["words"]):
        m = 1.0 if i in req["mask"] else 0.0
        pieces += [[float(i), m], [float(i) + 1.0, m]]
        ids += [i, i]
    print(json.dumps({"pieces": pieces, "word_ids": ids}), flush=True)
"#;
        let enc = ExternalEncoder::spawn("python3", &["-c".into(), script.into()]).unwrap();
        let words: Vec<String> = vec!["a".into(), "b".into(), "c".into()];
        let out: Array2<f64> = enc.encode_masked(&words, &[1]).unwrap();
        assert_eq!(out, array![[0.5, 0.0], [1.5, 1.0], [2.5, 0.0]]);
        assert!(ContextEncoder::<f64>::encode_masked(&enc, &words, &[5]).is_err());
    }
}
