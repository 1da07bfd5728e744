#![allow(dead_code)]

pub mod ogata_banks;
