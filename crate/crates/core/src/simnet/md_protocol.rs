use rand::Rng;

use crate::error::{Error, Result};
use crate::mirror::{
    finish, md_row, md_trace_header, most_violated, nonproductive_update, productive_update, LazyAverage,
    MdOptions, MdOutcome, MdParams, MdResult, Branch,
};
use crate::model::{ProblemInstance, QuadraticUtility, Utility};
use crate::rng::{seeded_rng, MD_STREAM};

use super::{AgentId, MessageKind, Network, Payload, SimStats};

#[derive(Debug, Clone)]
pub struct MdProtocolOptions {
    pub md: MdOptions,
    /// Compare the center's residual cache with a from-scratch residual
    /// every this many steps (0 disables).
    pub check_every: u64,
}

impl Default for MdProtocolOptions {
    fn default() -> Self {
        Self {
            md: MdOptions::default(),
            check_every: 100,
        }
    }
}

/// Absolute tolerance, scaled by the row's magnitude, for the residual cache.
const CACHE_TOL: f64 = 1e-9;

struct Center {
    residual: Vec<f64>,
    productive_count: u64,
    histogram: Vec<u64>,
}

/// Runs mirror descent with a decision center that owns the residual
/// cache and the sampling generator, and vertices that own their rates.
pub fn run_md_protocol(
    inst: &ProblemInstance<QuadraticUtility>,
    params: &MdParams,
    opts: &MdProtocolOptions,
) -> Result<(MdResult, SimStats)> {
    if params.steps == 0 {
        return Err(Error::InvalidInput("need at least one step".into()));
    }
    // Validates parameters exactly like the centralized solver.
    let reference = crate::mirror::MdState::new(inst, params.eps, params.m_u, params.x0.clone(), params.seed)?;
    let step_p = reference.step_productive;
    let step_np = reference.step_nonproductive;
    drop(reference);

    let c = &inst.c;
    let n = inst.n();
    let mut net = Network::new(c);
    let mut trace = md_trace_header(inst, params, &opts.md);
    trace.param("solver", "md-protocol");

    let mut x = params.x0.clone();
    let mut average = LazyAverage::new(n);
    let mut bound_exceeded = false;

    // Setup: connections learn their load and report residuals to the center.
    for (i, &xi) in x.iter().enumerate() {
        for &j in c.col(i) {
            net.send(MessageKind::RateReport, AgentId::Vertex(i), AgentId::Connection(j), Payload::Scalar(xi));
        }
    }
    let mut reported: Vec<Vec<Option<f64>>> = (0..inst.m()).map(|j| vec![None; c.row(j).len()]).collect();
    while let Some(msg) = net.deliver()? {
        if let (AgentId::Vertex(i), AgentId::Connection(j), Payload::Scalar(v)) = (msg.from, msg.to, msg.payload) {
            let k = c.row(j).binary_search(&i).expect("related vertex");
            reported[j][k] = Some(v);
        }
    }
    for (j, rates) in reported.iter().enumerate() {
        let mut load = Vec::with_capacity(rates.len());
        for (k, r) in rates.iter().enumerate() {
            load.push(r.ok_or_else(|| {
                Error::Deadlock(format!("connection {j} never heard from vertex {}", c.row(j)[k]))
            })?);
        }
        let load: f64 = load.into_iter().sum();
        net.send(
            MessageKind::ResidualReport,
            AgentId::Connection(j),
            AgentId::Center,
            Payload::Scalar(load - inst.b[j]),
        );
    }
    let mut center = Center {
        residual: vec![f64::NAN; inst.m()],
        productive_count: 0,
        histogram: vec![0; inst.m()],
    };
    while let Some(msg) = net.deliver()? {
        if let (AgentId::Connection(j), Payload::Scalar(r)) = (msg.from, msg.payload) {
            center.residual[j] = r;
        }
    }
    net.take_round();

    let mut rng = seeded_rng(params.seed, MD_STREAM);
    let stride = opts.md.trace_stride.max(1);
    let mut residual_updates = 0u64;
    for t in 0..params.steps {
        // Center: iteration type and the vertex that gets to step.
        let violated = most_violated(&center.residual, params.eps);
        let vertex = match violated {
            None => rng.gen_range(0..n),
            Some(j) => {
                let row = c.row(j);
                if row.is_empty() {
                    return Err(Error::EmptyRow(j));
                }
                row[rng.gen_range(0..row.len())]
            }
        };

        net.send(MessageKind::IterTypeRequest, AgentId::Vertex(vertex), AgentId::Center, Payload::Empty);
        expect(&mut net, MessageKind::IterTypeRequest)?;
        match violated {
            None => center.productive_count += 1,
            Some(j) => {
                center.histogram[j] += 1;
                net.stats.jt_announcements += 1;
            }
        }
        net.send(
            MessageKind::IterTypeReply,
            AgentId::Center,
            AgentId::Vertex(vertex),
            Payload::IterType {
                productive: violated.is_none(),
                row: violated,
                productive_count: center.productive_count,
            },
        );
        let reply = expect(&mut net, MessageKind::IterTypeReply)?;
        let Payload::IterType { productive, row, productive_count } = reply.payload else {
            return Err(Error::Protocol("malformed iteration-type reply".into()));
        };

        // Vertex: local update, report the change.
        let old = x[vertex];
        let next = if productive {
            let grad = inst.utility.derivative(vertex, old);
            let exceeded = grad.abs() > params.m_u;
            bound_exceeded |= exceeded;
            productive_update(old, grad, step_p, opts.md.literal_sign)
        } else {
            if let Some(j) = row {
                if !c.contains(j, vertex) {
                    return Err(Error::Protocol(format!("vertex {vertex} asked to relieve unrelated connection {j}")));
                }
            }
            nonproductive_update(old, step_np)
        };
        average.flush(vertex, old, productive_count);
        x[vertex] = next;
        net.send(
            MessageKind::UpdateNotify,
            AgentId::Vertex(vertex),
            AgentId::Center,
            Payload::Update {
                delta: next - old,
                bound_exceeded,
            },
        );
        let update = expect(&mut net, MessageKind::UpdateNotify)?;
        let Payload::Update { delta, .. } = update.payload else {
            return Err(Error::Protocol("malformed update notification".into()));
        };

        // Center: refresh only the rows the vertex loads.
        for &j in c.col(vertex) {
            center.residual[j] += delta;
        }
        let touched = c.col(vertex).len() as u64;
        residual_updates += touched;
        net.stats.residual_updates.push(touched);
        let sent = net.take_round();
        net.stats.round_messages.push(sent);

        let done = t + 1;
        if opts.check_every > 0 && done % opts.check_every == 0 {
            check_cache(inst, &x, &center.residual)?;
        }
        if done % stride == 0 || done == params.steps {
            let branch = match row {
                None => Branch::Productive { vertex },
                Some(j) => Branch::Nonproductive { row: j, vertex },
            };
            let x_hat = average.mean(&x, center.productive_count);
            trace.push(md_row(inst, done, done, &x, x_hat, branch)?);
        }
    }

    // Center announces |I| so every vertex can close its running sum.
    for i in 0..n {
        net.send(
            MessageKind::UpdateNotify,
            AgentId::Center,
            AgentId::Vertex(i),
            Payload::Count(center.productive_count),
        );
    }
    while let Some(msg) = net.deliver()? {
        if let (AgentId::Vertex(i), Payload::Count(count)) = (msg.to, msg.payload) {
            average.flush(i, x[i], count);
        }
    }
    net.stats.component_oracle_calls = params.steps;

    let outcome = MdOutcome {
        x_hat: average.mean(&x, center.productive_count),
        x_final: x,
        steps: params.steps,
        productive_count: center.productive_count,
        jt_histogram: center.histogram,
        m_u: params.m_u,
        gradient_bound_exceeded: bound_exceeded,
        residual_updates,
    };
    Ok((finish(inst, outcome, trace)?, net.stats))
}

fn expect(net: &mut Network, kind: MessageKind) -> Result<super::Message> {
    match net.deliver()? {
        Some(msg) if msg.kind == kind => Ok(msg),
        Some(msg) => Err(Error::Protocol(format!("expected {kind:?}, got {:?}", msg.kind))),
        None => Err(Error::Deadlock(format!("waiting for {kind:?} that was never sent"))),
    }
}

fn check_cache<U: Utility>(inst: &ProblemInstance<U>, x: &[f64], cached: &[f64]) -> Result<()> {
    let load = inst.c.mat_vec(x)?;
    for (j, (&l, &r)) in load.iter().zip(cached).enumerate() {
        let actual = l - inst.b[j];
        let scale = 1.0 + l.abs() + inst.b[j].abs();
        if (actual - r).abs() > CACHE_TOL * scale {
            return Err(Error::Consistency {
                row: j,
                cached: r,
                actual,
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{IncidenceMatrix, Norm};

    #[test]
    fn detects_cache_divergence() {
        let c = IncidenceMatrix::new(1, 1, [(0, 0)]).unwrap();
        let inst = ProblemInstance::new(c, vec![1.0], QuadraticUtility::new(vec![1.0], 0.5).unwrap(), Norm::L2, Norm::L2)
            .unwrap();
        assert!(check_cache(&inst, &[2.0], &[1.0]).is_ok());
        assert!(matches!(check_cache(&inst, &[2.0], &[1.1]), Err(Error::Consistency { row: 0, .. })));
    }
}
