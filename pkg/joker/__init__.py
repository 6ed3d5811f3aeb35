"""Memory-forensics toolkit for ARM kernel rootkits."""
