//! A1-lite: an in-memory distributed graph database running on a simulated
//! cluster, with transactional object storage, a property-graph layer, a
//! JSON query language and disaster recovery into a durable file store.

pub mod btree;
pub mod catalog;
pub mod db;
pub mod drstore;
pub mod error;
pub mod graph;
pub mod keys;
pub mod query;
pub mod simnet;
pub mod store;
pub mod tasks;

pub use db::{Database, Db, DbConfig};
pub use error::{Error, Result};
