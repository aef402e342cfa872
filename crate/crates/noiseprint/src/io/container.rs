//! Named-tensor container: the on-disk form of network weights, optimizer
//! state, and reference sidecars.
//!
//! Layout: a text header followed by raw little-endian f32 data.
//!
//! ```text
//! nptensors 1
//! meta <key> <value to end of line>
//! tensor <name> <dim0> <dim1> ...
//! data
//! <tensor bytes in declared order>
//! ```
//!
//! Float payloads are stored raw, so a save/load cycle reproduces every
//! tensor bit for bit. Metadata values are free-form single-line text.

use crate::error::{Error, Result};
use crate::nn::Tensor;
use std::fs;
use std::path::Path;

const MAGIC: &str = "nptensors 1";

#[derive(Debug, Clone, Default)]
pub struct TensorContainer {
    meta: Vec<(String, String)>,
    tensors: Vec<(String, Tensor)>,
}

impl TensorContainer {
    pub fn new() -> TensorContainer {
        TensorContainer::default()
    }

    pub fn push_meta(&mut self, key: &str, value: &str) -> Result<()> {
        if !is_valid_name(key) {
            return Err(Error::InvalidArgument(format!(
                "meta key \"{key}\" may only contain [A-Za-z0-9._-]"
            )));
        }
        if value.contains('\n') {
            return Err(Error::InvalidArgument(format!(
                "meta value for \"{key}\" must be a single line"
            )));
        }
        self.meta.push((key.to_string(), value.to_string()));
        Ok(())
    }

    pub fn push_tensor(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if !is_valid_name(name) {
            return Err(Error::InvalidArgument(format!(
                "tensor name \"{name}\" may only contain [A-Za-z0-9._-]"
            )));
        }
        if self.tensors.iter().any(|(n, _)| n == name) {
            return Err(Error::InvalidArgument(format!("duplicate tensor name \"{name}\"")));
        }
        self.tensors.push((name.to_string(), tensor));
        Ok(())
    }

    /// First value stored under `key`, if any.
    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn meta(&self) -> &[(String, String)] {
        &self.meta
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Like [`tensor`](Self::tensor) but failing with an error that names
    /// what is missing; shape mismatches get their own message.
    pub fn tensor_with_shape(&self, name: &str, shape: &[usize]) -> Result<&Tensor> {
        let t = self.tensor(name).ok_or_else(|| {
            Error::InvalidArgument(format!("container has no tensor named \"{name}\""))
        })?;
        if t.shape() != shape {
            return Err(Error::shape(
                format!("tensor \"{name}\""),
                format!("{shape:?}"),
                format!("{:?}", t.shape()),
            ));
        }
        Ok(t)
    }

    pub fn tensors(&self) -> &[(String, Tensor)] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }
}

fn is_valid_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'))
}

pub fn write_container(path: &Path, container: &TensorContainer) -> Result<()> {
    let mut text = String::from(MAGIC);
    text.push('\n');
    for (k, v) in &container.meta {
        text.push_str(&format!("meta {k} {v}\n"));
    }
    for (name, tensor) in &container.tensors {
        text.push_str(&format!("tensor {name}"));
        for d in tensor.shape() {
            text.push_str(&format!(" {d}"));
        }
        text.push('\n');
    }
    text.push_str("data\n");

    let mut bytes = text.into_bytes();
    for (_, tensor) in &container.tensors {
        bytes.reserve(tensor.len() * 4);
        for &v in tensor.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    super::write_atomic(path, &bytes)
}

pub fn read_container(path: &Path) -> Result<TensorContainer> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    let mut pos = 0usize;
    let mut line_no = 0usize;
    let mut next_line = |pos: &mut usize| -> Result<String> {
        line_no += 1;
        let start = *pos;
        while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
            *pos += 1;
        }
        if *pos >= bytes.len() {
            return Err(Error::format(path, line_no, "truncated header".to_string()));
        }
        let s = std::str::from_utf8(&bytes[start..*pos])
            .map_err(|_| Error::format(path, line_no, "header is not utf8".to_string()))?
            .to_string();
        *pos += 1;
        Ok(s)
    };

    if next_line(&mut pos)? != MAGIC {
        return Err(Error::format(path, 1, format!("expected \"{MAGIC}\" magic")));
    }

    let mut container = TensorContainer::new();
    let mut declared: Vec<(String, Vec<usize>)> = Vec::new();
    let mut header_lines = 1usize;
    loop {
        let line = next_line(&mut pos)?;
        header_lines += 1;
        if line == "data" {
            break;
        }
        if let Some(rest) = line.strip_prefix("meta ") {
            let (key, value) = rest.split_once(' ').unwrap_or((rest, ""));
            container.push_meta(key, value).map_err(|e| {
                Error::format(path, header_lines, e.to_string())
            })?;
        } else if let Some(rest) = line.strip_prefix("tensor ") {
            let mut it = rest.split_ascii_whitespace();
            let name = it
                .next()
                .ok_or_else(|| Error::format(path, header_lines, "tensor line missing name".to_string()))?;
            let dims = it
                .map(|t| {
                    t.parse::<usize>().map_err(|_| {
                        Error::format(path, header_lines, format!("bad dimension \"{t}\""))
                    })
                })
                .collect::<Result<Vec<usize>>>()?;
            if dims.is_empty() {
                return Err(Error::format(
                    path,
                    header_lines,
                    format!("tensor \"{name}\" declares no dimensions"),
                ));
            }
            declared.push((name.to_string(), dims));
        } else {
            return Err(Error::format(
                path,
                header_lines,
                format!("unrecognized header line \"{line}\""),
            ));
        }
    }

    let mut offset = pos;
    for (name, dims) in declared {
        let n: usize = dims.iter().product();
        let end = offset + n * 4;
        let raw = bytes.get(offset..end).ok_or_else(|| {
            Error::format(
                path,
                header_lines,
                format!("tensor \"{name}\" data truncated (wanted {} bytes)", n * 4),
            )
        })?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect::<Vec<f32>>();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "value in tensor \"{name}\" of {}",
                path.display()
            )));
        }
        container
            .push_tensor(&name, Tensor::from_vec(&dims, data)?)
            .map_err(|e| Error::format(path, header_lines, e.to_string()))?;
        offset = end;
    }
    if offset != bytes.len() {
        return Err(Error::format(
            path,
            header_lines,
            format!("{} trailing bytes after declared tensors", bytes.len() - offset),
        ));
    }
    Ok(container)
}
