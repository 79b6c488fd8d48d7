pub mod crypto;
pub mod enclave;
pub mod functions;
pub mod keyring;
pub mod oblivious;
pub mod protocols;
pub mod sim;
