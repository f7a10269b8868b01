//! Versioned weight container.
//!
//! ```text
//! mlp v1\n
//! spec dims=30,256,256,256,3 hidden_act=relu output_act=tanh\n
//! <little-endian f64 data: per layer, weight row-major then bias>
//! ```

use std::io::{BufRead, Read, Write};

use super::{Layer, Mlp, MlpSpec, NeuralError, OutputActivation, ParamSet};
use ndarray::{Array1, Array2};

pub const MLP_MAGIC: &str = "mlp v1";

fn spec_line(spec: &MlpSpec) -> String {
    let dims: Vec<String> = spec.dims().iter().map(|d| d.to_string()).collect();
    format!(
        "spec dims={} hidden_act=relu output_act={}",
        dims.join(","),
        spec.output_activation.name()
    )
}

fn parse_spec_line(line: &str) -> Result<MlpSpec, NeuralError> {
    let bad = || NeuralError::Checkpoint(format!("malformed spec line '{line}'"));
    let rest = line.strip_prefix("spec ").ok_or_else(bad)?;
    let mut dims = None;
    let mut out_act = None;
    for token in rest.split_whitespace() {
        let (key, value) = token.split_once('=').ok_or_else(bad)?;
        match key {
            "dims" => {
                let d: Vec<usize> = value
                    .split(',')
                    .map(|v| v.parse().map_err(|_| bad()))
                    .collect::<Result<_, _>>()?;
                dims = Some(d);
            }
            "hidden_act" if value == "relu" => {}
            "output_act" => {
                out_act = Some(match value {
                    "tanh" => OutputActivation::Tanh,
                    "identity" => OutputActivation::Identity,
                    _ => return Err(bad()),
                })
            }
            _ => return Err(bad()),
        }
    }
    let dims = dims.ok_or_else(bad)?;
    if dims.len() < 2 {
        return Err(bad());
    }
    Ok(MlpSpec::new(
        dims[0],
        dims[1..dims.len() - 1].to_vec(),
        dims[dims.len() - 1],
        out_act.ok_or_else(bad)?,
    ))
}

/// Writes a parameter set with its spec header.
pub fn write_params<W: Write, P: ParamSet + ?Sized>(out: &mut W, spec: &MlpSpec, params: &P) -> Result<(), NeuralError> {
    writeln!(out, "{MLP_MAGIC}")?;
    writeln!(out, "{}", spec_line(spec))?;
    let mut buf = Vec::with_capacity(8 * spec.param_count());
    for s in params.param_slices() {
        for v in s {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Reads a parameter set; returns its spec and layers.
pub fn read_params<R: BufRead>(input: &mut R) -> Result<(MlpSpec, Vec<Layer>), NeuralError> {
    let mut line = String::new();
    input.read_line(&mut line)?;
    if line.trim_end() != MLP_MAGIC {
        return Err(NeuralError::Checkpoint(format!(
            "unsupported container version '{}'",
            line.trim_end()
        )));
    }
    line.clear();
    input.read_line(&mut line)?;
    let spec = parse_spec_line(line.trim_end())?;
    let mut layers = Vec::new();
    for w in spec.dims().windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let weight = read_f64s(input, fan_in * fan_out)?;
        let bias = read_f64s(input, fan_out)?;
        layers.push(Layer {
            weight: Array2::from_shape_vec((fan_out, fan_in), weight).expect("length checked"),
            bias: Array1::from(bias),
        });
    }
    Ok((spec, layers))
}

fn read_f64s<R: Read>(input: &mut R, n: usize) -> Result<Vec<f64>, NeuralError> {
    let mut bytes = vec![0u8; 8 * n];
    input
        .read_exact(&mut bytes)
        .map_err(|e| NeuralError::Checkpoint(format!("truncated parameter data: {e}")))?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

pub fn serialize_weights(weights: &Mlp) -> Vec<u8> {
    let mut out = Vec::new();
    write_params(&mut out, weights.spec(), weights).expect("writing to memory");
    out
}

/// Loads weights, optionally checking them against an expected spec.
pub fn deserialize_weights(bytes: &[u8], expected: Option<&MlpSpec>) -> Result<Mlp, NeuralError> {
    let mut cursor = std::io::Cursor::new(bytes);
    let (spec, layers) = read_params(&mut cursor)?;
    if let Some(exp) = expected {
        check_spec(exp, &spec)?;
    }
    Mlp::from_layers(spec, layers)
}

pub(crate) fn check_spec(expected: &MlpSpec, got: &MlpSpec) -> Result<(), NeuralError> {
    if expected.input_dim != got.input_dim {
        return Err(NeuralError::DimensionMismatch {
            expected: expected.input_dim,
            got: got.input_dim,
        });
    }
    if expected != got {
        return Err(NeuralError::Checkpoint(format!(
            "network shape {:?} does not match expected {:?}",
            got.dims(),
            expected.dims()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::state_dim;

    #[test]
    fn round_trip_is_bit_exact() {
        let spec = MlpSpec::new(7, vec![16, 16, 16], 1, OutputActivation::Identity);
        let net = Mlp::init(spec.clone(), 9).unwrap();
        let bytes = serialize_weights(&net);
        let back = deserialize_weights(&bytes, Some(&spec)).unwrap();
        assert_eq!(back, net);
        for (a, b) in net.param_slices().iter().zip(back.param_slices()) {
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn wrong_input_dim_is_rejected() {
        let spec = MlpSpec::new(7, vec![4], 1, OutputActivation::Identity);
        let bytes = serialize_weights(&Mlp::init(spec, 1).unwrap());
        let other = MlpSpec::new(8, vec![4], 1, OutputActivation::Identity);
        assert!(matches!(
            deserialize_weights(&bytes, Some(&other)),
            Err(NeuralError::DimensionMismatch { expected: 8, got: 7 })
        ));
    }

    #[test]
    fn full_size_actor_header() {
        let spec = MlpSpec::new(state_dim(4), vec![256, 256, 256], 3, OutputActivation::Tanh);
        let bytes = serialize_weights(&Mlp::init(spec, 0).unwrap());
        let text = String::from_utf8_lossy(&bytes[..80]);
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("mlp v1"));
        assert_eq!(
            lines.next(),
            Some("spec dims=30,256,256,256,3 hidden_act=relu output_act=tanh")
        );
    }

    #[test]
    fn version_and_truncation_errors() {
        assert!(deserialize_weights(b"mlp v2\nspec dims=1,1 hidden_act=relu output_act=tanh\n", None).is_err());
        assert!(deserialize_weights(b"mlp v1\nspec dims=1,1 hidden_act=relu output_act=tanh\n\x00\x00", None).is_err());
    }
}
