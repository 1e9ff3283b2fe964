//! Generic message-queue interface.
//!
//! Services are declared in a [`config::ConfigTree`] and addressed by pseudo-URLs
//! of the form `<service>::<Queue|Topic>::<name>`. The [`manager`] shares one
//! connection per service between all producers and consumers created through
//! [`api`]. Producers can fall back to a local on-disk [`spool`] while the
//! broker is unreachable.


pub mod config;
pub mod connector;
pub mod manager;
pub mod message;


pub mod stomp;
pub mod api;
pub mod spool;
pub mod pipeline;
