//! Judges one response with an OpenAI-compatible endpoint.
//!
//! ```text
//! TREEPREF_BASE_URL=http://localhost:8000/v1 TREEPREF_MODEL=my-model \
//!     TREEPREF_API_KEY=... cargo run --example remote_endpoint
//! ```
//!
//! Without `TREEPREF_BASE_URL` the example prints the request body it would send.

use anyhow::{Context, Result};

use treepref::gateway::{ChatMessage, EndpointConfig, GenerationRequest, RemoteBackend};
use treepref::judgment::Judge;
use treepref::{Origin, Producer, Prompt, Response, SamplingPlan};

fn main() -> Result<()> {
    let instruction = "Write a response containing between 5 and 8 words.";
    let response = "Short answers can still be very helpful to readers.";

    let mut config = EndpointConfig {
        model_name: std::env::var("TREEPREF_MODEL").unwrap_or_else(|_| "default".into()),
        max_retries: 2,
        ..Default::default()
    };
    if std::env::var("TREEPREF_API_KEY").is_ok() {
        config.api_key_env = Some("TREEPREF_API_KEY".into());
    }
    let Ok(base_url) = std::env::var("TREEPREF_BASE_URL") else {
        let backend = RemoteBackend::new(config)?;
        let messages = treepref::judgment::render_judge_messages(
            &Prompt::new("demo", instruction, Origin::Seed),
            &Response::new(response, Producer::Actor, 0),
            &Default::default(),
        )?;
        let plan = SamplingPlan::default();
        let request = GenerationRequest::new(messages, plan.n_votes, plan.judge).with_seed(1);
        println!("TREEPREF_BASE_URL is not set; this is the body that would be posted:");
        println!("{}", serde_json::to_string_pretty(&backend.request_body(&request, request.n, request.seed))?);
        return Ok(());
    };
    config.base_url = base_url;
    let backend = RemoteBackend::new(config)?;

    let ping =
        GenerationRequest::new(vec![ChatMessage::user("Reply with the word ready.")], 1, SamplingPlan::default().judge);
    let reply = treepref::gateway::generate(&backend, &ping).context("endpoint did not answer")?;
    println!("endpoint says: {}", reply[0].trim());

    let (judgment, votes) = Judge::default().judge(&backend, instruction, response, &SamplingPlan::default(), 1)?;
    println!("votes {:?} ({} discarded)", votes.votes, votes.discarded);
    println!("{:?} ({:.2}): {}", judgment.label, judgment.score, judgment.explanation);
    Ok(())
}
