//! Starts the review service on port 8080 with a throwaway store.

use biliscope::pipeline::{Pipeline, PipelineConfig};
use biliscope::service::{serve, AppState, ServiceConfig};

#[tokio::main]
async fn main() -> biliscope::Result<()> {
    let store = std::env::temp_dir().join("biliscope-example-store");
    let state = AppState::open(Pipeline::new(PipelineConfig::default())?, ServiceConfig::new(&store))?;
    println!("store {}; try: curl --data-binary @image.pgm localhost:8080/images", store.display());
    serve(state, ([127, 0, 0, 1], 8080).into()).await
}
