use crate::agent::DdpgAgent;
use crate::neural::{Layer, ParamSet};

/// First parameter at which a replica differs from replica 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Divergence {
    pub replica: usize,
    /// Network or optimizer buffer, e.g. `critic` or `actor_opt.second_moment`.
    pub component: String,
    pub layer: usize,
    /// `weight` or `bias`.
    pub tensor: &'static str,
    /// Row-major index within the tensor.
    pub index: usize,
    pub reference: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyReport {
    pub replicas: usize,
    pub divergence: Option<Divergence>,
}

impl ConsistencyReport {
    pub fn consistent(&self) -> bool {
        self.divergence.is_none()
    }
}

fn components(a: &DdpgAgent) -> Vec<(&'static str, &[Layer])> {
    vec![
        ("actor", a.actor.layers()),
        ("critic", a.critic.layers()),
        ("actor_target", a.actor_target.layers()),
        ("critic_target", a.critic_target.layers()),
        ("actor_opt.first_moment", a.actor_opt.first_moment.layers()),
        ("actor_opt.second_moment", a.actor_opt.second_moment.layers()),
        ("critic_opt.first_moment", a.critic_opt.first_moment.layers()),
        ("critic_opt.second_moment", a.critic_opt.second_moment.layers()),
    ]
}

/// Compares every replica to replica 0 bit for bit: the four networks, both
/// ADAM moment buffers and the step counters.
pub fn replica_consistency_check(replicas: &[&DdpgAgent]) -> ConsistencyReport {
    let report = |divergence| ConsistencyReport {
        replicas: replicas.len(),
        divergence,
    };
    let Some((reference, others)) = replicas.split_first() else {
        return report(None);
    };
    let ref_parts = components(reference);
    for (r, other) in others.iter().enumerate() {
        let replica = r + 1;
        for ((name, ref_layers), (_, layers)) in ref_parts.iter().zip(components(other)) {
            for (li, (a, b)) in ref_layers.iter().zip(layers).enumerate() {
                for (tensor, xa, xb) in [
                    ("weight", a.weight.as_slice(), b.weight.as_slice()),
                    ("bias", a.bias.as_slice(), b.bias.as_slice()),
                ] {
                    let (xa, xb) = (xa.expect("standard layout"), xb.expect("standard layout"));
                    let mismatch = if xa.len() != xb.len() {
                        Some(xa.len().min(xb.len()))
                    } else {
                        xa.iter().zip(xb).position(|(p, q)| p.to_bits() != q.to_bits())
                    };
                    if let Some(index) = mismatch {
                        return report(Some(Divergence {
                            replica,
                            component: name.to_string(),
                            layer: li,
                            tensor,
                            index,
                            reference: xa.get(index).copied().unwrap_or(f64::NAN),
                            value: xb.get(index).copied().unwrap_or(f64::NAN),
                        }));
                    }
                }
            }
        }
        for (name, sa, sb) in [
            ("actor_opt.step", reference.actor_opt.step, other.actor_opt.step),
            ("critic_opt.step", reference.critic_opt.step, other.critic_opt.step),
        ] {
            if sa != sb {
                return report(Some(Divergence {
                    replica,
                    component: name.to_string(),
                    layer: 0,
                    tensor: "counter",
                    index: 0,
                    reference: sa as f64,
                    value: sb as f64,
                }));
            }
        }
    }
    report(None)
}
