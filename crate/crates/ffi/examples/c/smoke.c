/* Encode an outlier pair, decode it, and run it through a 2x1 array. */
#include <stdio.h>
#include "overq.h"

int main(void) {
    OverqQuantConfig cfg;
    if (overq_quant_config_new(4, 1.0, &cfg) != OVERQ_STATUS_OK) return 1;

    const double x[2] = {3.0, 0.0};
    OverqEncoded *v = NULL;
    if (overq_encode(x, 2, &cfg, OVERQ_VARIANT_SHIFT, &v) != OVERQ_STATUS_OK) return 2;

    double decoded[2];
    overq_decode(v, decoded, 2);

    const int64_t w[2] = {5, -100};
    int64_t ref = 0;
    overq_dot_reference(v, w, 2, 7, &ref);

    OverqArray *arr = NULL;
    if (overq_array_new(2, 1, OVERQ_PE_VARIANT_SHIFT, 4, w, 7, &arr) != OVERQ_STATUS_OK) return 3;
    const OverqEncoded *batch[1] = {v};
    int64_t out = 0;
    uint64_t cycles = 0;
    if (overq_array_run(arr, batch, 1, &out, &cycles) != OVERQ_STATUS_OK) return 4;

    printf("decoded=%.3f ref=%lld sim=%lld cycles=%llu\n", decoded[0], (long long)ref,
           (long long)out, (unsigned long long)cycles);

    OverqEncoded *bad = NULL;
    if (overq_encode(x, 2, &cfg, (OverqVariant)4, &bad) != OVERQ_STATUS_OK) return 5;
    overq_encoded_free(bad);

    overq_array_free(arr);
    overq_encoded_free(v);
    return ref == out ? 0 : 6;
}
