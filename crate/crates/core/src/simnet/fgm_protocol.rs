use crate::error::{Error, Result};
use crate::fgm::{base_trace, record_row, update_price, weights, FgmOptions, FgmResult, FgmSetup, StopRule};
use crate::model::{ProblemInstance, QuadraticUtility};
use crate::oracle::{SmoothedDualOracle, SmoothingConfig};

use super::{AgentId, MessageKind, Network, Payload, SimStats};

#[derive(Debug, Clone, Default)]
pub struct FgmProtocolOptions {
    /// Solver options; the stop rule is replaced by the iteration count.
    pub fgm: FgmOptions,
    /// Drop every price notification on this `(connection, vertex)` link.
    pub drop_price_link: Option<(usize, usize)>,
}

struct VertexAgent {
    id: usize,
    /// Prices of related connections, in ascending connection order.
    prices: Vec<Option<f64>>,
    primal_accum: f64,
}

struct ConnectionAgent {
    id: usize,
    capacity: f64,
    lambda0: f64,
    lambda: f64,
    y: f64,
    z: f64,
    grad_accum: f64,
    /// Rates of related vertices, in ascending vertex order.
    rates: Vec<Option<f64>>,
}

fn slot(list: &[usize], id: usize) -> usize {
    list.binary_search(&id).expect("sender is a neighbor")
}

/// Runs `iters` global iterations of the fast gradient method with
/// connections owning prices and vertices owning rates.
pub fn run_fgm_protocol(
    inst: &ProblemInstance<QuadraticUtility>,
    cfg: &SmoothingConfig,
    lambda0: &[f64],
    iters: u64,
    opts: &FgmProtocolOptions,
) -> Result<(FgmResult, SimStats)> {
    let fgm_opts = FgmOptions {
        stop: StopRule::Iterations(iters),
        max_iter: iters,
        ..opts.fgm.clone()
    };
    let setup = FgmSetup::new(inst, cfg, lambda0, &fgm_opts)?;
    let oracle = SmoothedDualOracle::new(inst, setup.cfg.clone())?;
    let c = &inst.c;
    let mut net = Network::new(c);
    let mut trace = base_trace(inst, &setup, &fgm_opts);
    trace.param("solver", "fgm-protocol");

    let mut vertices: Vec<VertexAgent> = (0..inst.n())
        .map(|i| VertexAgent {
            id: i,
            prices: vec![None; c.col(i).len()],
            primal_accum: 0.0,
        })
        .collect();
    let mut conns: Vec<ConnectionAgent> = (0..inst.m())
        .map(|j| ConnectionAgent {
            id: j,
            capacity: inst.b[j],
            lambda0: lambda0[j],
            lambda: lambda0[j],
            y: lambda0[j],
            z: lambda0[j],
            grad_accum: 0.0,
            rates: vec![None; c.row(j).len()],
        })
        .collect();

    let notify = |net: &mut Network, conn: &ConnectionAgent| {
        for &i in c.row(conn.id) {
            if opts.drop_price_link == Some((conn.id, i)) {
                continue;
            }
            net.send(
                MessageKind::PriceNotify,
                AgentId::Connection(conn.id),
                AgentId::Vertex(i),
                Payload::Scalar(conn.lambda),
            );
        }
    };

    // Initial prices.
    for conn in &conns {
        notify(&mut net, conn);
    }
    deliver_prices(&mut net, &mut vertices, c)?;
    net.take_round();

    let stride = fgm_opts.trace_stride.max(1);
    let mut weight_sum = 0.0;
    for t in 0..setup.iterations {
        let alpha = weights::alpha(t);
        // Vertex phase: best response to current prices, report the rate.
        for v in vertices.iter_mut() {
            let mut cost = Vec::with_capacity(v.prices.len());
            for (k, p) in v.prices.iter_mut().enumerate() {
                match p.take() {
                    Some(price) => cost.push(price),
                    None => {
                        return Err(Error::Deadlock(format!(
                            "vertex {} still waits for the price of connection {} in iteration {t}",
                            v.id,
                            c.col(v.id)[k]
                        )))
                    }
                }
            }
            let x = oracle.response_unchecked(v.id, cost.into_iter().sum())?;
            v.primal_accum += alpha * x;
            for &j in c.col(v.id) {
                net.send(
                    MessageKind::RateReport,
                    AgentId::Vertex(v.id),
                    AgentId::Connection(j),
                    Payload::Scalar(x),
                );
            }
        }
        while let Some(msg) = net.deliver()? {
            let (AgentId::Vertex(i), AgentId::Connection(j), Payload::Scalar(x)) = (msg.from, msg.to, msg.payload) else {
                return Err(Error::Protocol(format!("unexpected {:?} in rate phase", msg.kind)));
            };
            let k = slot(c.row(j), i);
            conns[j].rates[k] = Some(x);
        }

        // Connection phase: local price update, then notify.
        for conn in conns.iter_mut() {
            let mut load = Vec::with_capacity(conn.rates.len());
            for (k, r) in conn.rates.iter_mut().enumerate() {
                match r.take() {
                    Some(x) => load.push(x),
                    None => {
                        return Err(Error::Deadlock(format!(
                            "connection {} still waits for the rate of vertex {} in iteration {t}",
                            conn.id,
                            c.row(conn.id)[k]
                        )))
                    }
                }
            }
            let load: f64 = load.into_iter().sum();
            let (y, z, next) = update_price(
                conn.lambda,
                conn.lambda0,
                conn.capacity - load,
                &mut conn.grad_accum,
                t,
                setup.lipschitz,
            );
            if !next.is_finite() {
                return Err(Error::NonFinite {
                    what: "dual iterate",
                    index: conn.id,
                });
            }
            conn.y = y;
            conn.z = z;
            conn.lambda = next;
            notify(&mut net, conn);
        }
        deliver_prices(&mut net, &mut vertices, c)?;
        let sent = net.take_round();
        net.stats.round_messages.push(sent);
        weight_sum += alpha;

        let done = t + 1;
        if done % stride == 0 || done == setup.iterations {
            let x_hat: Vec<f64> = vertices.iter().map(|v| v.primal_accum / weight_sum).collect();
            let y: Vec<f64> = conns.iter().map(|c| c.y).collect();
            trace.push(record_row(&oracle, done, &x_hat, &y)?);
        }
    }

    net.stats.component_oracle_calls = oracle.calls();
    let x_hat = if setup.iterations == 0 {
        vec![0.0; inst.n()]
    } else {
        vertices.iter().map(|v| v.primal_accum / weight_sum).collect()
    };
    let result = FgmResult {
        lambda_final: conns.iter().map(|c| c.lambda).collect(),
        y_final: conns.iter().map(|c| c.y).collect(),
        x_hat,
        trace,
        iterations: setup.iterations,
        converged: true,
        lipschitz: setup.lipschitz,
        mu: setup.cfg.mu,
        r_q: setup.r_q,
    };
    Ok((result, net.stats))
}

fn deliver_prices(
    net: &mut Network,
    vertices: &mut [VertexAgent],
    c: &crate::model::IncidenceMatrix,
) -> Result<()> {
    while let Some(msg) = net.deliver()? {
        let (AgentId::Connection(j), AgentId::Vertex(i), Payload::Scalar(price)) = (msg.from, msg.to, msg.payload) else {
            return Err(Error::Protocol(format!("unexpected {:?} in price phase", msg.kind)));
        };
        let k = slot(c.col(i), j);
        vertices[i].prices[k] = Some(price);
    }
    Ok(())
}
