use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};
use tmc::grw::{sample_locations, GaussianFactor};
use tmc::io::{attachments_csv, grid_binary, grid_csv, grid_sidecar, read_factor_file, read_text, samples_csv, write_csv, write_file, FactorTable};
use tmc::loracs::{attachment_posterior, DatumFactor, InducingCheckpoint, InducingSet, PriorTimes};
use tmc::mcmc::{chain_rng, run_chains, ChainCheckpoint, ChainState};
use tmc::phylogeny::{sample_prior, Phylogeny, TmcParams};
use tmc::predictive::{density_grid, GridSpec, PredictiveMixture, PredictiveSampler};
use tmc::{Error, Result};

use crate::{
    AttachArgs, ClusterArgs, Command, Common, DensityArgs, ExportArgs, GridFormat, Init, LoracsFitArgs, PriorArgs, SamplePredictiveArgs,
    SamplePriorArgs, TreeFormat,
};

/// Stream offset of the per-step fitting randomness, clear of the chain streams.
const FIT_STREAM: u64 = 1 << 48;

pub const CLUSTER_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ClusterCheckpoint {
    schema_version: u32,
    chains: Vec<ChainCheckpoint>,
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::SamplePrior(a) => with_threads(&a.common, || sample_prior_cmd(&a)),
        Command::Cluster(a) => with_threads(&a.common, || cluster(&a)),
        Command::Density(a) => with_threads(&a.common, || density(&a)),
        Command::SamplePredictive(a) => with_threads(&a.common, || sample_predictive(&a)),
        Command::LoracsFit(a) => with_threads(&a.common, || loracs_fit(&a)),
        Command::Attach(a) => with_threads(&a.common, || attach(&a)),
        Command::Export(a) => export(&a),
    }
}

fn with_threads(common: &Common, f: impl FnOnce() -> Result<()> + Send) -> Result<()> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(common.threads)
        .build()
        .map_err(|e| Error::Argument(format!("cannot start thread pool: {e}")))?;
    pool.install(f)
}

fn params(p: &PriorArgs) -> Result<TmcParams> {
    TmcParams::new(p.a, p.b)
}

fn out_dir(dir: &Path) -> Result<&Path> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    Ok(dir)
}

fn write_tree(dir: &Path, stem: &str, tree: &Phylogeny) -> Result<()> {
    write_file(dir.join(format!("{stem}.nwk")), tree.to_newick() + "\n")?;
    write_file(dir.join(format!("{stem}.json")), tree.to_json())?;
    write_file(dir.join(format!("{stem}.dot")), tree.to_dot())
}

/// A JSON tree, or one Newick tree per nonempty line.
fn read_trees(path: &Path) -> Result<Vec<Phylogeny>> {
    let text = read_text(path)?;
    if text.trim_start().starts_with('{') {
        return Ok(vec![Phylogeny::from_json(&text)?]);
    }
    let trees = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            Phylogeny::from_newick(l.trim()).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if trees.is_empty() {
        return Err(Error::Parse {
            line: 1,
            message: "no tree in file".into(),
        });
    }
    Ok(trees)
}

fn read_evidence(path: &Path) -> Result<Vec<GaussianFactor>> {
    read_factor_file(path)?.to_evidence()
}

fn read_data(path: &Path, default_variance: Option<f64>) -> Result<Vec<DatumFactor>> {
    read_factor_file(path)?.to_data(default_variance)
}

fn sample_prior_cmd(a: &SamplePriorArgs) -> Result<()> {
    let params = params(&a.prior)?;
    let mut rng = chain_rng(a.common.seed, 0);
    let tree = sample_prior(&params, a.n_leaves, &mut rng)?;
    let dir = out_dir(&a.out)?;
    write_tree(dir, "tree", &tree)?;
    if let Some(d) = a.dim {
        if d == 0 {
            return Err(Error::Argument("dim must be at least 1".into()));
        }
        let locs = sample_locations(&tree, d, &mut rng);
        let table = FactorTable::new(locs.into_iter().map(|g| g.mean).collect(), None)?;
        write_file(dir.join("locations.csv"), write_csv(&table))?;
    }
    log::info!("sampled a {}-leaf tree", tree.n_leaves());
    Ok(())
}

fn cluster(a: &ClusterArgs) -> Result<()> {
    let params = params(&a.prior)?;
    let evidence = read_evidence(&a.evidence)?;
    let mut chains = match &a.resume {
        Some(path) => {
            let ck: ClusterCheckpoint = serde_json::from_str(&read_text(path)?)?;
            if ck.schema_version != CLUSTER_SCHEMA_VERSION {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("unsupported cluster checkpoint schema version {}", ck.schema_version),
                });
            }
            ck.chains
                .iter()
                .map(|c| ChainState::from_checkpoint(c, evidence.clone()))
                .collect::<Result<Vec<_>>>()?
        }
        None => {
            if a.chains == 0 {
                return Err(Error::Argument("at least one chain is needed".into()));
            }
            (0..a.chains)
                .map(|i| {
                    let mut rng = chain_rng(a.common.seed, i as u64);
                    let tree = sample_prior(&params, evidence.len(), &mut rng)?;
                    ChainState::new(tree, evidence.clone(), params, rng)
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    let outputs = run_chains(&mut chains, a.n_steps, a.thin)?;

    let mut diag = String::from("chain,step,log_joint,accept_rate\n");
    let mut samples = String::new();
    for (c, out) in outputs.iter().enumerate() {
        for r in &out.trace {
            writeln!(diag, "{c},{},{},{}", r.step, r.log_joint, r.accept_rate).expect("write to string");
        }
        for t in &out.samples {
            samples.push_str(&t.to_newick());
            samples.push('\n');
        }
        log::info!("chain {c}: {} steps, accept rate {:.3}", chains[c].steps(), chains[c].accept_rate());
    }
    let (map, _) = chains
        .iter()
        .map(ChainState::best)
        .fold(None, |best: Option<(&Phylogeny, f64)>, cur| match best {
            Some(b) if b.1 >= cur.1 => Some(b),
            _ => Some(cur),
        })
        .expect("at least one chain");

    let dir = out_dir(&a.out)?;
    write_file(dir.join("diagnostics.csv"), diag)?;
    write_file(dir.join("samples.nwk"), samples)?;
    write_tree(dir, "map", map)?;
    let ck = ClusterCheckpoint {
        schema_version: CLUSTER_SCHEMA_VERSION,
        chains: chains.iter().map(ChainState::checkpoint).collect(),
    };
    write_file(dir.join("checkpoint.json"), serde_json::to_string(&ck)?)
}

fn mixture(trees: &[Phylogeny], evidence: &[GaussianFactor], params: &TmcParams, order: usize) -> Result<PredictiveMixture> {
    let parts = trees
        .iter()
        .map(|t| PredictiveMixture::new(t, evidence, params, order))
        .collect::<Result<Vec<_>>>()?;
    PredictiveMixture::pooled(parts)
}

fn density(a: &DensityArgs) -> Result<()> {
    let params = params(&a.prior)?;
    let trees = read_trees(&a.tree)?;
    let evidence = read_evidence(&a.evidence)?;
    let mix = mixture(&trees, &evidence, &params, a.quad_order)?;
    let spec = GridSpec {
        x_min: a.x_min,
        x_max: a.x_max,
        y_min: a.y_min,
        y_max: a.y_max,
        nx: a.nx,
        ny: a.ny,
    };
    let grid = density_grid(&mix, spec)?;
    if let Some(bad) = grid.values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("density grid contains {bad}")));
    }
    log::info!("grid has {} local maxima", grid.local_maxima().len());
    let dir = out_dir(&a.out)?;
    match a.format {
        GridFormat::Csv => write_file(dir.join("density.csv"), grid_csv(&grid))?,
        GridFormat::Binary => write_file(dir.join("density.bin"), grid_binary(&grid))?,
    }
    write_file(dir.join("density.json"), grid_sidecar(&grid))
}

fn sample_predictive(a: &SamplePredictiveArgs) -> Result<()> {
    let params = params(&a.prior)?;
    let trees = read_trees(&a.tree)?;
    let evidence = read_evidence(&a.evidence)?;
    let samplers = trees
        .iter()
        .map(|t| PredictiveSampler::new(t, &evidence, &params))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = chain_rng(a.common.seed, 0);
    let draws = (0..a.n_samples)
        .map(|_| {
            let k = if samplers.len() > 1 { rng.gen_range(0..samplers.len()) } else { 0 };
            samplers[k].sample(&mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    write_file(out_dir(&a.out)?.join("samples.csv"), samples_csv(&draws))
}

fn loracs_fit(a: &LoracsFitArgs) -> Result<()> {
    let data = read_data(&a.data, a.datum_variance)?;
    let mut set = match &a.resume {
        Some(path) => InducingSet::from_checkpoint(&serde_json::from_str::<InducingCheckpoint>(&read_text(path)?)?)?,
        None => {
            let params = params(&a.prior)?;
            let d = data.first().map_or(0, DatumFactor::dim);
            match a.init {
                Init::Kmeans => InducingSet::from_kmeans(&data, a.m, params, a.n_trees, a.common.seed)?,
                Init::Random => InducingSet::random(a.m, d, a.init_scale, params, a.n_trees, a.common.seed)?,
            }
        }
    };
    if a.batch_size == Some(0) {
        return Err(Error::Argument("batch size must be at least 1".into()));
    }
    let mut log_csv = String::from("step,mean_elbo,grad_norm,applied,chain_accept_rate\n");
    for _ in 0..a.n_steps {
        let mut rng = chain_rng(set.seed(), FIT_STREAM + set.steps());
        let batch: Vec<DatumFactor> = match a.batch_size {
            Some(bs) if bs < data.len() => sample_indices(&mut rng, data.len(), bs).into_iter().map(|i| data[i].clone()).collect(),
            _ => data.clone(),
        };
        let r = set.fit_step(&batch, a.step_size, a.n_mcmc, &mut rng)?;
        if !r.mean_elbo.is_finite() {
            return Err(Error::Numerical(format!("ELBO is {} at step {}", r.mean_elbo, r.step)));
        }
        writeln!(log_csv, "{},{},{},{},{}", r.step, r.mean_elbo, r.grad_norm, r.applied, r.chain_accept_rate).expect("write to string");
        log::debug!("step {}: elbo {:.4}", r.step, r.mean_elbo);
    }
    log::info!("fitted {} inducing points over {} steps", set.points().len(), set.steps());
    let dir = out_dir(&a.out)?;
    write_file(dir.join("fit.csv"), log_csv)?;
    write_file(dir.join("inducing.csv"), write_csv(&FactorTable::new(set.points().to_vec(), None)?))?;
    write_file(dir.join("checkpoint.json"), serde_json::to_string(&set.checkpoint())?)?;
    write_tree(dir, "map", set.map_tree())
}

fn attach(a: &AttachArgs) -> Result<()> {
    let ck: InducingCheckpoint = serde_json::from_str(&read_text(&a.checkpoint)?)?;
    let set = InducingSet::from_checkpoint(&ck)?;
    let data = read_data(&a.data, a.datum_variance)?;
    let tree = set.map_tree();
    let posts = data
        .iter()
        .enumerate()
        .map(|(i, x)| attachment_posterior(set.points(), set.params(), tree, x, &PriorTimes, &mut chain_rng(a.common.seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let dir = out_dir(&a.out)?;
    write_file(dir.join("attachments.csv"), attachments_csv(&posts))?;
    write_tree(dir, "tree", tree)
}

fn export(a: &ExportArgs) -> Result<()> {
    let trees = read_trees(&a.tree)?;
    let tree = trees.get(a.index).ok_or_else(|| Error::Lookup { kind: "tree", id: a.index })?;
    let text = match a.format {
        TreeFormat::Newick => tree.to_newick() + "\n",
        TreeFormat::Json => tree.to_json() + "\n",
        TreeFormat::Dot => tree.to_dot(),
    };
    match &a.output {
        Some(p) => write_file(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
