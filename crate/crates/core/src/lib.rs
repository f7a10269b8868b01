//! Shape control of a deformable linear object with synchronized
//! data-parallel DDPG.

pub mod softbody;
pub mod environment;
pub mod neural;
pub mod agent;
pub mod goaldb;
pub mod trainer;
pub mod eval;
pub mod config;
