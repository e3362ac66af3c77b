//! Named `f32` tensors in the safetensors container format.

use std::borrow::Cow;
use std::collections::HashMap;

use safetensors::tensor::{Dtype, SafeTensors, View};
use thermvis_core::perceptual::NamedTensor;

struct F32View<'a> {
    shape: &'a [usize],
    data: &'a [f32],
}

impl View for F32View<'_> {
    fn dtype(&self) -> Dtype {
        Dtype::F32
    }
    fn shape(&self) -> &[usize] {
        self.shape
    }
    fn data(&self) -> Cow<'_, [u8]> {
        Cow::Owned(self.data.iter().flat_map(|v| v.to_le_bytes()).collect())
    }
    fn data_len(&self) -> usize {
        self.data.len() * 4
    }
}

/// Encodes `(name, shape, values)` triples. Names must be unique.
pub fn encode<'a>(
    tensors: impl IntoIterator<Item = (&'a str, &'a [usize], &'a [f32])>,
    metadata: Option<HashMap<String, String>>,
) -> Result<Vec<u8>, String> {
    let views: Vec<(&str, F32View)> = tensors
        .into_iter()
        .map(|(name, shape, data)| (name, F32View { shape, data }))
        .collect();
    safetensors::serialize(views, metadata).map_err(|e| e.to_string())
}

/// Decodes every tensor, widening or narrowing `f64`/`f16`-free float data to `f32`.
/// Tensors come back sorted by name.
pub fn decode(bytes: &[u8]) -> Result<Vec<NamedTensor<f32>>, String> {
    let st = SafeTensors::deserialize(bytes).map_err(|e| e.to_string())?;
    let mut out = Vec::with_capacity(st.len());
    for (name, view) in st.tensors() {
        let raw = view.data();
        let data: Vec<f32> = match view.dtype() {
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")) as f32)
                .collect(),
            other => return Err(format!("tensor {name}: unsupported dtype {other:?}")),
        };
        out.push(NamedTensor {
            name,
            shape: view.shape().to_vec(),
            data,
        });
    }
    out.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(out)
}

/// Free-form string metadata stored in the header.
pub fn metadata(bytes: &[u8]) -> Result<HashMap<String, String>, String> {
    let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| e.to_string())?;
    Ok(meta.metadata().clone().unwrap_or_default())
}

/// Names of tensors whose byte range extends past the end of a (truncated)
/// buffer, in ascending offset order. `None` if the header itself is unreadable.
pub fn incomplete_tensors(bytes: &[u8]) -> Option<Vec<String>> {
    let n = u64::from_le_bytes(bytes.get(..8)?.try_into().ok()?) as usize;
    let header: serde_json::Map<String, serde_json::Value> =
        serde_json::from_slice(bytes.get(8..8usize.checked_add(n)?)?).ok()?;
    let available = bytes.len() - 8 - n;
    let mut cut: Vec<(u64, String)> = header
        .iter()
        .filter(|(name, _)| name.as_str() != "__metadata__")
        .filter_map(|(name, info)| {
            let offsets = info.get("data_offsets")?.as_array()?;
            let (start, end) = (offsets.first()?.as_u64()?, offsets.get(1)?.as_u64()?);
            (end as usize > available).then(|| (start, name.clone()))
        })
        .collect();
    cut.sort();
    Some(cut.into_iter().map(|(_, name)| name).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_truncation_report() {
        let a = [1.0f32, 2.0, 3.0, 4.0];
        let b = [0.5f32; 6];
        let bytes = encode(
            [("a", &[2usize, 2][..], &a[..]), ("b", &[6usize][..], &b[..])],
            None,
        )
        .unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(
            (
                back[0].name.as_str(),
                back[0].shape.as_slice(),
                back[0].data.as_slice()
            ),
            ("a", &[2, 2][..], &a[..])
        );
        assert_eq!(back[1].data, b);
        assert_eq!(incomplete_tensors(&bytes).unwrap(), Vec::<String>::new());
        let truncated = &bytes[..bytes.len() - 3];
        assert!(decode(truncated).is_err());
        assert_eq!(incomplete_tensors(truncated).unwrap().len(), 1);
    }
}
