//! Agent container: a `ddpg v1` metadata block followed by the four
//! networks and both optimizer states, each in the network container format.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use crate::neural::checkpoint::{read_params, write_params};
use crate::neural::{AdamConfig, AdamState, Layer, Mlp, MlpGradients, MlpSpec, ParamSet};

use super::{AgentError, DdpgAgent, DdpgConfig, OuParams};

pub const AGENT_MAGIC: &str = "ddpg v1";

/// Run context stored next to the weights.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AgentCheckpointMeta {
    /// Fingerprint of the environment the agent was trained in.
    pub fingerprint: String,
    /// Completed training episodes.
    pub episode: usize,
    pub seed: u64,
}

const NETS: [&str; 4] = ["actor", "critic", "actor_target", "critic_target"];

pub fn save_agent<W: Write>(out: &mut W, agent: &DdpgAgent, meta: &AgentCheckpointMeta) -> Result<(), AgentError> {
    let c = agent.config();
    let hidden: Vec<String> = c.hidden.iter().map(|h| h.to_string()).collect();
    writeln!(out, "{AGENT_MAGIC}")?;
    writeln!(out, "state_dim={}", agent.state_dim())?;
    writeln!(out, "hidden={}", hidden.join(","))?;
    writeln!(out, "gamma={}", c.gamma)?;
    writeln!(out, "tau={}", c.tau)?;
    writeln!(out, "batch_size={}", c.batch_size)?;
    writeln!(out, "buffer_capacity={}", c.buffer_capacity)?;
    writeln!(out, "actor_lr={}", c.actor_lr)?;
    writeln!(out, "critic_lr={}", c.critic_lr)?;
    writeln!(out, "ou_theta={}", c.noise.theta)?;
    writeln!(out, "ou_sigma={}", c.noise.sigma)?;
    writeln!(out, "ou_mu={}", c.noise.mu)?;
    writeln!(out, "ou_dt={}", c.noise.dt)?;
    writeln!(out, "fingerprint={}", meta.fingerprint)?;
    writeln!(out, "episode={}", meta.episode)?;
    writeln!(out, "seed={}", meta.seed)?;
    writeln!(out, "end")?;
    let nets = [&agent.actor, &agent.critic, &agent.actor_target, &agent.critic_target];
    for (name, net) in NETS.iter().zip(nets) {
        writeln!(out, "block {name}")?;
        write_params(out, net.spec(), net)?;
    }
    for (name, opt, net) in [
        ("actor_opt", &agent.actor_opt, &agent.actor),
        ("critic_opt", &agent.critic_opt, &agent.critic),
    ] {
        let a = opt.config;
        writeln!(
            out,
            "block {name} step={} lr={} beta1={} beta2={} eps={}",
            opt.step, a.learning_rate, a.beta1, a.beta2, a.epsilon
        )?;
        write_params(out, net.spec(), &opt.first_moment)?;
        write_params(out, net.spec(), &opt.second_moment)?;
    }
    Ok(())
}

fn err(msg: impl Into<String>) -> AgentError {
    AgentError::Checkpoint(msg.into())
}

fn read_line<R: BufRead>(input: &mut R) -> Result<String, AgentError> {
    let mut line = String::new();
    if input.read_line(&mut line)? == 0 {
        return Err(err("unexpected end of file"));
    }
    Ok(line.trim_end().to_string())
}

fn parse<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T, AgentError> {
    map.get(key)
        .ok_or_else(|| err(format!("missing key '{key}'")))?
        .parse()
        .map_err(|_| err(format!("bad value for '{key}'")))
}

fn read_net<R: BufRead>(input: &mut R, expected: &MlpSpec) -> Result<Vec<Layer>, AgentError> {
    let (spec, layers) = read_params(input)?;
    crate::neural::checkpoint::check_spec(expected, &spec)?;
    Ok(layers)
}

pub fn load_agent<R: BufRead>(input: &mut R) -> Result<(DdpgAgent, AgentCheckpointMeta), AgentError> {
    let magic = read_line(input)?;
    if magic != AGENT_MAGIC {
        return Err(err(format!("unsupported agent container '{magic}'")));
    }
    let mut kv = BTreeMap::new();
    loop {
        let line = read_line(input)?;
        if line == "end" {
            break;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| err(format!("bad metadata line '{line}'")))?;
        kv.insert(k.to_string(), v.to_string());
    }
    let hidden: Vec<usize> = kv
        .get("hidden")
        .ok_or_else(|| err("missing key 'hidden'"))?
        .split(',')
        .map(|h| h.parse().map_err(|_| err("bad hidden widths")))
        .collect::<Result<_, _>>()?;
    let config = DdpgConfig {
        hidden,
        gamma: parse(&kv, "gamma")?,
        tau: parse(&kv, "tau")?,
        batch_size: parse(&kv, "batch_size")?,
        buffer_capacity: parse(&kv, "buffer_capacity")?,
        actor_lr: parse(&kv, "actor_lr")?,
        critic_lr: parse(&kv, "critic_lr")?,
        noise: OuParams {
            theta: parse(&kv, "ou_theta")?,
            sigma: parse(&kv, "ou_sigma")?,
            mu: parse(&kv, "ou_mu")?,
            dt: parse(&kv, "ou_dt")?,
        },
    };
    config.validate()?;
    let state_dim: usize = parse(&kv, "state_dim")?;
    let meta = AgentCheckpointMeta {
        fingerprint: kv.get("fingerprint").cloned().unwrap_or_default(),
        episode: parse(&kv, "episode")?,
        seed: parse(&kv, "seed")?,
    };

    let actor_spec = config.actor_spec(state_dim);
    let critic_spec = config.critic_spec(state_dim);
    let mut nets = Vec::new();
    for (i, name) in NETS.iter().enumerate() {
        let header = read_line(input)?;
        if header != format!("block {name}") {
            return Err(err(format!("expected block '{name}', found '{header}'")));
        }
        let spec = if i % 2 == 0 { &actor_spec } else { &critic_spec };
        nets.push(Mlp::from_layers(spec.clone(), read_net(input, spec)?)?);
    }
    let critic_target = nets.pop().expect("four networks");
    let actor_target = nets.pop().expect("four networks");
    let critic = nets.pop().expect("four networks");
    let actor = nets.pop().expect("four networks");

    let mut agent = DdpgAgent::from_networks(state_dim, config, actor, critic, meta.seed, 0);
    agent.actor_target = actor_target;
    agent.critic_target = critic_target;
    for (name, spec) in [("actor_opt", &actor_spec), ("critic_opt", &critic_spec)] {
        let header = read_line(input)?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some("block") || fields.next() != Some(name) {
            return Err(err(format!("expected block '{name}', found '{header}'")));
        }
        let opt_kv: BTreeMap<String, String> = fields
            .filter_map(|f| f.split_once('='))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        let state = AdamState {
            config: AdamConfig {
                learning_rate: parse(&opt_kv, "lr")?,
                beta1: parse(&opt_kv, "beta1")?,
                beta2: parse(&opt_kv, "beta2")?,
                epsilon: parse(&opt_kv, "eps")?,
            },
            first_moment: MlpGradients { layers: read_net(input, spec)? },
            second_moment: MlpGradients { layers: read_net(input, spec)? },
            step: parse(&opt_kv, "step")?,
        };
        if name == "actor_opt" {
            agent.actor_opt = state;
        } else {
            agent.critic_opt = state;
        }
    }
    if !agent.actor.all_finite() || !agent.critic.all_finite() {
        return Err(err("non-finite weights"));
    }
    Ok((agent, meta))
}
