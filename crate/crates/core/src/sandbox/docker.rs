//! Container-engine backend.
//!
//! Checkpoints are committed images tagged with the snapshot id; restore swaps
//! the running container for a fresh one started from that image. Environment
//! variables and the working directory are tracked here and passed to every
//! exec, so they survive the swap.

use std::any::Any;
use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use bollard::exec::{CreateExecOptions, StartExecResults};
use bollard::models::{ContainerConfig, ContainerCreateBody, HostConfig};
use bollard::query_parameters::{
    CommitContainerOptions, CreateContainerOptions, RemoveContainerOptions, RemoveImageOptions,
};
use bollard::Docker;
use futures_util::StreamExt;
use serde::{Deserialize, Serialize};
use tokio::runtime::Runtime;

use super::{ExecResult, SandboxBackend, SandboxError, SandboxProvider, TIMEOUT_EXIT_CODE};

const SNAPSHOT_REPO: &str = "setupx-snapshot";
const FINAL_REPO: &str = "setupx-final";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DockerConfig {
    pub workdir: String,
    /// Bytes; 0 means unlimited.
    pub memory_limit: i64,
    /// CPUs; 0 means unlimited.
    pub cpus: f64,
    pub shell: String,
}

impl Default for DockerConfig {
    fn default() -> Self {
        Self {
            workdir: "/workspace".into(),
            memory_limit: 0,
            cpus: 0.0,
            shell: "/bin/sh".into(),
        }
    }
}

fn backend_err(e: impl std::fmt::Display) -> SandboxError {
    SandboxError::Backend(e.to_string())
}

fn runtime() -> Result<Runtime, SandboxError> {
    tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()
        .map_err(backend_err)
}

pub struct DockerProvider {
    docker: Docker,
    config: DockerConfig,
}

impl DockerProvider {
    pub fn connect(config: DockerConfig) -> Result<Self, SandboxError> {
        let docker = Docker::connect_with_local_defaults().map_err(backend_err)?;
        Ok(Self { docker, config })
    }

    fn start(&self, image: &str, name: &str) -> Result<Box<dyn SandboxBackend>, SandboxError> {
        let mut sb = DockerSandbox {
            docker: self.docker.clone(),
            rt: runtime()?,
            config: self.config.clone(),
            name: sanitize(name),
            container: String::new(),
            env: BTreeMap::new(),
            workdir: self.config.workdir.clone(),
            saved: BTreeMap::new(),
        };
        sb.container = sb.launch(image)?;
        Ok(Box::new(sb))
    }
}

impl SandboxProvider for DockerProvider {
    fn provision(&self, base_image: &str, run_id: &str) -> Result<Box<dyn SandboxBackend>, SandboxError> {
        self.start(base_image, run_id)
    }

    fn open(&self, image: &str, session: &str) -> Result<Box<dyn SandboxBackend>, SandboxError> {
        self.start(image, session)
    }
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c.to_ascii_lowercase() } else { '-' })
        .collect()
}

pub struct DockerSandbox {
    docker: Docker,
    rt: Runtime,
    config: DockerConfig,
    name: String,
    container: String,
    env: BTreeMap<String, String>,
    workdir: String,
    /// Session state that lives outside the container filesystem.
    saved: BTreeMap<String, (BTreeMap<String, String>, String)>,
}

impl DockerSandbox {
    fn env_list(&self) -> Vec<String> {
        self.env.iter().map(|(k, v)| format!("{k}={v}")).collect()
    }

    fn launch(&self, image: &str) -> Result<String, SandboxError> {
        let host_config = HostConfig {
            memory: (self.config.memory_limit > 0).then_some(self.config.memory_limit),
            nano_cpus: (self.config.cpus > 0.0).then_some((self.config.cpus * 1e9) as i64),
            ..Default::default()
        };
        let body = ContainerCreateBody {
            image: Some(image.to_string()),
            cmd: Some(vec!["sleep".into(), "infinity".into()]),
            entrypoint: Some(vec![]),
            env: Some(self.env_list()),
            working_dir: Some(self.workdir.clone()),
            host_config: Some(host_config),
            ..Default::default()
        };
        let docker = &self.docker;
        self.rt.block_on(async {
            let created = docker
                .create_container(None::<CreateContainerOptions>, body)
                .await
                .map_err(backend_err)?;
            docker
                .start_container(&created.id, None)
                .await
                .map_err(backend_err)?;
            Ok(created.id)
        })
    }

    fn remove_container(&self, id: &str) {
        let opts = RemoveContainerOptions {
            force: true,
            ..Default::default()
        };
        if let Err(e) = self.rt.block_on(self.docker.remove_container(id, Some(opts))) {
            tracing::warn!(container = id, error = %e, "container removal failed");
        }
    }

    fn commit_as(&self, repo: &str, tag: &str) -> Result<String, SandboxError> {
        let opts = CommitContainerOptions {
            container: Some(self.container.clone()),
            repo: Some(repo.to_string()),
            tag: Some(tag.to_string()),
            pause: true,
            ..Default::default()
        };
        self.rt
            .block_on(self.docker.commit_container(
                opts,
                ContainerConfig {
                    env: Some(self.env_list()),
                    working_dir: Some(self.workdir.clone()),
                    ..Default::default()
                },
            ))
            .map_err(|e| SandboxError::SnapshotFailure(e.to_string()))?;
        Ok(format!("{repo}:{tag}"))
    }

    async fn run_exec(docker: &Docker, container: &str, opts: CreateExecOptions<String>) -> Result<(String, String, i32), SandboxError> {
        let exec = docker.create_exec(container, opts).await.map_err(|e| {
            if e.to_string().contains("is not running") {
                SandboxError::SandboxDead(container.to_string())
            } else {
                backend_err(e)
            }
        })?;
        let mut stdout = String::new();
        let mut stderr = String::new();
        if let StartExecResults::Attached { mut output, .. } =
            docker.start_exec(&exec.id, None).await.map_err(backend_err)?
        {
            while let Some(chunk) = output.next().await {
                match chunk.map_err(backend_err)? {
                    bollard::container::LogOutput::StdErr { message } => {
                        stderr.push_str(&String::from_utf8_lossy(&message))
                    }
                    other => stdout.push_str(&String::from_utf8_lossy(&other.into_bytes())),
                }
            }
        }
        let inspect = docker.inspect_exec(&exec.id).await.map_err(backend_err)?;
        Ok((stdout, stderr, inspect.exit_code.unwrap_or(-1) as i32))
    }
}

impl Drop for DockerSandbox {
    fn drop(&mut self) {
        if !self.container.is_empty() {
            self.remove_container(&self.container.clone());
        }
    }
}

impl SandboxBackend for DockerSandbox {
    fn exec(&mut self, command: &str, timeout: Duration) -> Result<ExecResult, SandboxError> {
        let opts = CreateExecOptions {
            attach_stdout: Some(true),
            attach_stderr: Some(true),
            cmd: Some(vec![self.config.shell.clone(), "-c".into(), command.to_string()]),
            env: Some(self.env_list()),
            working_dir: Some(self.workdir.clone()),
            ..Default::default()
        };
        let started = Instant::now();
        let outcome = self.rt.block_on(async {
            tokio::time::timeout(timeout, Self::run_exec(&self.docker, &self.container, opts)).await
        });
        let duration = started.elapsed().as_secs_f64();
        match outcome {
            Ok(Ok((stdout, stderr, exit_code))) => Ok(ExecResult {
                command: command.to_string(),
                stdout,
                stderr,
                exit_code,
                duration,
                timed_out: false,
            }),
            Ok(Err(e)) => Err(e),
            Err(_) => Ok(ExecResult {
                command: command.to_string(),
                stdout: String::new(),
                stderr: format!("command timed out after {}s", timeout.as_secs()),
                exit_code: TIMEOUT_EXIT_CODE,
                duration,
                timed_out: true,
            }),
        }
    }

    fn set_env(&mut self, key: &str, value: &str) -> Result<(), SandboxError> {
        self.env.insert(key.to_string(), value.to_string());
        Ok(())
    }

    fn set_workdir(&mut self, dir: &str) -> Result<(), SandboxError> {
        self.workdir = crate::shell::resolve_path(&self.workdir, dir);
        Ok(())
    }

    fn capture(&mut self, snapshot_id: &str) -> Result<(), SandboxError> {
        self.commit_as(SNAPSHOT_REPO, &format!("{}-{}", self.name, sanitize(snapshot_id)))?;
        self.saved
            .insert(snapshot_id.to_string(), (self.env.clone(), self.workdir.clone()));
        Ok(())
    }

    fn restore(&mut self, snapshot_id: &str) -> Result<(), SandboxError> {
        let image = format!("{SNAPSHOT_REPO}:{}-{}", self.name, sanitize(snapshot_id));
        if let Some((env, workdir)) = self.saved.get(snapshot_id) {
            self.env = env.clone();
            self.workdir = workdir.clone();
        }
        let fresh = self
            .launch(&image)
            .map_err(|e| SandboxError::SnapshotFailure(e.to_string()))?;
        let old = std::mem::replace(&mut self.container, fresh);
        self.remove_container(&old);
        Ok(())
    }

    fn discard(&mut self, snapshot_id: &str) -> Result<(), SandboxError> {
        self.saved.remove(snapshot_id);
        let image = format!("{SNAPSHOT_REPO}:{}-{}", self.name, sanitize(snapshot_id));
        let opts = RemoveImageOptions {
            force: true,
            ..Default::default()
        };
        self.rt
            .block_on(self.docker.remove_image(&image, Some(opts), None))
            .map(|_| ())
            .map_err(backend_err)
    }

    fn commit(&mut self, tag: &str) -> Result<String, SandboxError> {
        self.commit_as(FINAL_REPO, &sanitize(tag))
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}
