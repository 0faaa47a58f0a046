use std::sync::Arc;
use std::time::Duration;

use tokattr_core::TabularLM;
use tokattr_gateway::{GatewayEndpoint, GatewayServer, RetryPolicy, ServerOptions};

pub fn toy() -> TabularLM {
    TabularLM::random_tabular(3, 1, 7).unwrap()
}

pub fn serve(model: TabularLM, options: ServerOptions) -> GatewayServer {
    GatewayServer::start(Arc::new(model), "127.0.0.1:0", options).unwrap()
}

pub fn endpoint(server: &GatewayServer) -> GatewayEndpoint {
    GatewayEndpoint::new(server.url()).with_retry(RetryPolicy {
        retries: 2,
        backoff: Duration::from_millis(5),
    })
}
