"""Deep BSDE solver for decoupled FBSDEs with jumps."""
