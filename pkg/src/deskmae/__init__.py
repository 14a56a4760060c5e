"""Desk-scale masked-autoencoder ViT toolkit for multispectral tiles."""
