//! The single writer. One OS thread owns the network, the live parameters
//! and every session; HTTP handlers send it commands and read the state it
//! publishes after each one.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use arc_swap::ArcSwap;
use axum::http::StatusCode;
use clickforge_core::adapter::{AdaptConfig, AdaptMode, Session};
use clickforge_core::guidance::Click;
use clickforge_core::netcore::{load_checkpoint, Network, ParamSet};
use clickforge_core::protocol::*;
use clickforge_core::raster::{decode_image_png, decode_mask_png, encode_mask_png, iou, Mask, RasterImage};
use tokio::sync::{mpsc, oneshot};

use crate::config::ServerConfig;
use crate::error::{ApiError, ServerError};
use crate::store::CheckpointStore;

pub type Reply<T> = oneshot::Sender<Result<T, ApiError>>;

pub enum Command {
    Create {
        image: Vec<u8>,
        gt: Option<Vec<u8>>,
        mode: Option<AdaptMode>,
        reply: Reply<CreatedSession>,
    },
    Click {
        id: String,
        click: Click,
        reply: Reply<ClickResponse>,
    },
    Undo {
        id: String,
        reply: Reply<UndoResponse>,
    },
    Finish {
        id: String,
        reply: Reply<FinishResponse>,
    },
    Discard {
        id: String,
        reply: Reply<()>,
    },
}

/// Everything readers may see, replaced wholesale after each command.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub sessions: HashMap<String, Arc<SessionState>>,
    pub health: Health,
    pub checkpoints: CheckpointList,
}

struct Record {
    /// `None` once finished.
    session: Option<Session>,
    gt: Option<Mask>,
    state: Arc<SessionState>,
}

pub struct Engine {
    net: Network,
    live: ParamSet,
    version: u64,
    store: CheckpointStore,
    masks_dir: PathBuf,
    defaults: AdaptConfig,
    max_side: usize,
    retry_after: u64,
    sessions: HashMap<String, Record>,
    adapting: Option<String>,
    published: Arc<ArcSwap<Snapshot>>,
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn active<'a>(sessions: &'a mut HashMap<String, Record>, id: &str) -> Result<&'a mut Record, ApiError> {
    let rec = sessions.get_mut(id).ok_or_else(|| ApiError::not_found(id))?;
    if rec.session.is_none() {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "finished",
            format!("session `{id}` is finished"),
        ));
    }
    Ok(rec)
}

impl Engine {
    /// Loads the newest stored checkpoint, or imports `cfg.checkpoint` as
    /// version 0 when the store is empty.
    pub fn open(cfg: &ServerConfig) -> Result<Self, ServerError> {
        let net = Network::new(cfg.model.clone())?;
        let store = CheckpointStore::open(cfg.state_dir.join("checkpoints"))?;
        let (version, live) = match store.latest()? {
            Some(found) => found,
            None => {
                let path = cfg.checkpoint.as_ref().ok_or_else(|| {
                    ServerError::Config("no stored checkpoint and no `checkpoint` configured".into())
                })?;
                let params = load_checkpoint(path)?;
                net.check_params(&params)?;
                store.write(0, &params)?;
                (0, params)
            }
        };
        net.check_params(&live)?;
        let masks_dir = cfg.state_dir.join("masks");
        std::fs::create_dir_all(&masks_dir)?;
        log::info!("serving checkpoint version {version} from {}", store.dir().display());
        let mut engine = Self {
            net,
            live,
            version,
            store,
            masks_dir,
            defaults: cfg.adapt.clone(),
            max_side: cfg.max_side,
            retry_after: cfg.retry_after_secs,
            sessions: HashMap::new(),
            adapting: None,
            published: Arc::new(ArcSwap::from_pointee(Snapshot {
                sessions: HashMap::new(),
                health: Health {
                    status: "ok".into(),
                    checkpoint_version: version,
                    adapting_session: None,
                },
                checkpoints: CheckpointList {
                    current: version,
                    checkpoints: Vec::new(),
                },
            })),
        };
        engine.publish();
        Ok(engine)
    }

    pub fn snapshots(&self) -> Arc<ArcSwap<Snapshot>> {
        Arc::clone(&self.published)
    }

    /// Processes commands until every sender is gone.
    pub fn run(mut self, mut rx: mpsc::Receiver<Command>) {
        while let Some(cmd) = rx.blocking_recv() {
            // Readers must see the new state by the time the caller hears back.
            match cmd {
                Command::Create { image, gt, mode, reply } => {
                    let r = self.create(&image, gt.as_deref(), mode);
                    self.publish();
                    let _ = reply.send(r);
                }
                Command::Click { id, click, reply } => {
                    let r = self.click(&id, click);
                    self.publish();
                    let _ = reply.send(r);
                }
                Command::Undo { id, reply } => {
                    let r = self.undo(&id);
                    self.publish();
                    let _ = reply.send(r);
                }
                Command::Finish { id, reply } => {
                    let r = self.finish(&id);
                    self.publish();
                    let _ = reply.send(r);
                }
                Command::Discard { id, reply } => {
                    let r = self.discard(&id);
                    self.publish();
                    let _ = reply.send(r);
                }
            }
        }
        log::info!("engine stopped");
    }

    fn publish(&mut self) {
        let checkpoints = match self.store.list() {
            Ok(list) => list,
            Err(e) => {
                log::warn!("listing checkpoints: {e}");
                self.published.load().checkpoints.checkpoints.clone()
            }
        };
        self.published.store(Arc::new(Snapshot {
            sessions: self
                .sessions
                .iter()
                .map(|(k, r)| (k.clone(), Arc::clone(&r.state)))
                .collect(),
            health: Health {
                status: "ok".into(),
                checkpoint_version: self.version,
                adapting_session: self.adapting.clone(),
            },
            checkpoints: CheckpointList {
                current: self.version,
                checkpoints,
            },
        }));
    }

    fn create(&mut self, image: &[u8], gt: Option<&[u8]>, mode: Option<AdaptMode>) -> Result<CreatedSession, ApiError> {
        let image = decode_image_png(image)
            .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_image", e.to_string()))?;
        self.check_dimensions(&image)?;
        let gt = match gt {
            Some(bytes) => {
                let m = decode_mask_png(bytes)
                    .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_mask", e.to_string()))?;
                if m.height() != image.height() || m.width() != image.width() {
                    return Err(ApiError::new(
                        StatusCode::UNPROCESSABLE_ENTITY,
                        "dimensions",
                        format!(
                            "ground truth is {}x{}, image is {}x{}",
                            m.height(),
                            m.width(),
                            image.height(),
                            image.width()
                        ),
                    ));
                }
                Some(m)
            }
            None => None,
        };
        let cfg = self.defaults.clone().with_mode(mode.unwrap_or(self.defaults.mode));
        let adapting = cfg.mode != AdaptMode::Off;
        if adapting {
            if let Some(active) = &self.adapting {
                return Err(ApiError::busy(
                    format!("adapting session `{active}` is still active"),
                    self.retry_after,
                ));
            }
        }
        let id = uuid::Uuid::new_v4().simple().to_string();
        let (h, w) = (image.height(), image.width());
        let session = Session::begin(id.clone(), &self.net, image, &self.live, cfg.clone())?;
        let state = SessionState {
            id: id.clone(),
            mode: cfg.mode,
            status: SessionStatus::Active,
            height: h,
            width: w,
            clicks: Vec::new(),
            mask: MaskRle::encode(&Mask::zeros(h, w)),
            iou: gt.as_ref().map(|g| iou(&Mask::zeros(h, w), g)).transpose()?,
            can_undo: false,
            created_at: now(),
            finished_at: None,
        };
        self.sessions.insert(
            id.clone(),
            Record {
                session: Some(session),
                gt,
                state: Arc::new(state),
            },
        );
        if adapting {
            self.adapting = Some(id.clone());
        }
        log::info!("session {id} created ({h}x{w}, mode {})", cfg.mode);
        Ok(CreatedSession {
            id,
            mode: cfg.mode,
            height: h,
            width: w,
        })
    }

    fn check_dimensions(&self, image: &RasterImage) -> Result<(), ApiError> {
        let factor = 1usize << self.net.config().bsm_depth;
        let (h, w) = (image.height(), image.width());
        if h % factor != 0 || w % factor != 0 || h > self.max_side || w > self.max_side {
            return Err(ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "dimensions",
                format!(
                    "image is {h}x{w}; sides must be multiples of {factor} and at most {}",
                    self.max_side
                ),
            ));
        }
        Ok(())
    }

    fn click(&mut self, id: &str, click: Click) -> Result<ClickResponse, ApiError> {
        let rec = active(&mut self.sessions, id)?;
        let session = rec.session.as_mut().expect("active");
        let logged = session.step_log().len();
        let refined = session.process_click(&self.net, click)?;
        let mask = session.mask();
        let score = rec.gt.as_ref().map(|g| iou(&mask, g)).transpose()?;
        let steps = session.step_log()[logged..].to_vec();
        let rle = MaskRle::encode(&mask);
        rec.state = Arc::new(SessionState {
            clicks: session.clicks().to_vec(),
            mask: rle.clone(),
            iou: score,
            can_undo: session.can_undo(),
            ..(*rec.state).clone()
        });
        Ok(ClickResponse {
            session: id.to_string(),
            ordinal: click.ordinal,
            mask: rle,
            confidence: ConfidenceSummary::of(&refined),
            iou: score,
            steps,
        })
    }

    fn undo(&mut self, id: &str) -> Result<UndoResponse, ApiError> {
        let rec = active(&mut self.sessions, id)?;
        let session = rec.session.as_mut().expect("active");
        let mask = session.undo()?;
        let score = rec.gt.as_ref().map(|g| iou(&mask, g)).transpose()?;
        let rle = MaskRle::encode(&mask);
        rec.state = Arc::new(SessionState {
            clicks: session.clicks().to_vec(),
            mask: rle.clone(),
            iou: score,
            can_undo: session.can_undo(),
            ..(*rec.state).clone()
        });
        Ok(UndoResponse {
            session: id.to_string(),
            clicks: session.clicks().len(),
            mask: rle,
            iou: score,
        })
    }

    fn finish(&mut self, id: &str) -> Result<FinishResponse, ApiError> {
        let next_version = self.version + 1;
        let rec = active(&mut self.sessions, id)?;
        let session = rec.session.as_ref().expect("active");
        if session.clicks().is_empty() {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                "session_state",
                "cannot finish a session without clicks",
            ));
        }
        let adapting = session.config().mode != AdaptMode::Off;
        let mask = session.mask();
        let mask_path = self.masks_dir.join(format!("{id}.png"));
        std::fs::write(&mask_path, encode_mask_png(&mask)?)
            .map_err(|e| ApiError::internal(format!("writing mask: {e}")))?;
        let version = if adapting {
            self.store
                .write(next_version, session.params())
                .map_err(|e| ApiError::internal(format!("writing checkpoint: {e}")))?;
            Some(next_version)
        } else {
            None
        };

        let (_, params) = rec.session.take().expect("active").end()?;
        rec.state = Arc::new(SessionState {
            status: SessionStatus::Finished,
            can_undo: false,
            finished_at: Some(now()),
            ..(*rec.state).clone()
        });
        if let Some(v) = version {
            self.live = params;
            self.version = v;
            self.adapting = None;
            log::info!("session {id} finished; checkpoint version {v}");
        }
        Ok(FinishResponse {
            session: id.to_string(),
            mask: MaskRle::encode(&mask),
            mask_path: mask_path.display().to_string(),
            checkpoint_version: version,
        })
    }

    /// Drops an unfinished session without touching the live parameters.
    fn discard(&mut self, id: &str) -> Result<(), ApiError> {
        active(&mut self.sessions, id)?;
        self.sessions.remove(id);
        if self.adapting.as_deref() == Some(id) {
            self.adapting = None;
        }
        log::info!("session {id} discarded");
        Ok(())
    }
}
