pub mod highprec;
