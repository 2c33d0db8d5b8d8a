//! `serve`: attaches an interactive run to the annotation service.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::SocketAddr;

use evidal_core::active::{write_history_csv, ActiveLearner, QueryStrategy};
use evidal_service::{AppState, Session};

use crate::commands::{base_model, load_pool};
use crate::config::RunConfig;
use crate::error::CliResult;

/// A run for `seed` under `strategy`, with the same base model `al-run`
/// would use.
pub fn build_session(cfg: &RunConfig, strategy: QueryStrategy, seed: u64) -> CliResult<Session> {
    let pool = load_pool(&cfg.data)?;
    let (model, _) = base_model(cfg, &pool, seed, cfg.pipeline.pretrain)?;
    let learner = ActiveLearner::new(cfg.al_config(strategy, seed), &pool, model)?;
    Ok(Session::new(pool, learner)?)
}

/// Serves until Ctrl-C, then writes the history CSV under `--out` when one
/// is configured.
pub fn serve(cfg: &RunConfig, strategy: QueryStrategy, seed: u64, port: u16) -> CliResult<()> {
    let state = AppState::attached(build_session(cfg, strategy, seed)?);
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(SocketAddr::from(([127, 0, 0, 1], port))).await?;
        eprintln!("annotation service listening on http://{}", listener.local_addr()?);
        let app = evidal_service::router(state.clone());
        axum_serve(listener, app).await
    })?;
    if let Some(out) = &cfg.out {
        std::fs::create_dir_all(out)?;
        let history = state.with_session(|s| s.learner().history().to_vec()).unwrap_or_default();
        let mut w = BufWriter::new(File::create(out.join(crate::commands::ROUNDS_CSV))?);
        write_history_csv(&mut w, &history)?;
        w.flush()?;
    }
    Ok(())
}

async fn axum_serve(listener: tokio::net::TcpListener, app: evidal_service::Router) -> std::io::Result<()> {
    evidal_service::serve_with_shutdown(listener, app, async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await
}
