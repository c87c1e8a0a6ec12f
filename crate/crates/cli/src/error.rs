use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{0}: {1}")]
    Io(PathBuf, #[source] std::io::Error),
    #[error("dataset `{name}` is not registered in {catalog} (registered: {known})")]
    UnknownDataset { name: String, catalog: PathBuf, known: String },
    #[error("no checkpoint for epoch {epoch} in {dir} (available: {available})")]
    MissingEpoch { epoch: usize, dir: PathBuf, available: String },
    #[error("{0}")]
    Failed(String),
    #[error(transparent)]
    Core(#[from] circlesnake::Error),
}
