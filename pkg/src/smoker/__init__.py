"""MQTT 5.0 sessions whose clientID is a public key, established by signing a broker nonce."""

__version__ = "0.1.0"
