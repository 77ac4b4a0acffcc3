"""Command-line front end for the minibatch OT toolkit."""
